"""HVCM model file serialization.

Layout (little-endian): magic ``HVCM``, u32 version=1, u32 json_len, a JSON
config header {G, d, q, C, stats_mode, ridge_policy, threshold}, then per
class: G x (f64 weight, d/G f64 mean, row-major lower triangle of the
Cholesky factor as f64), then the projection head (d*q f64 weights + d f64
bias). The loader rejects unknown versions.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from hvcm.attribute_space import ProjectionHead
from hvcm.class_density import ClassModel, GroupGaussian, HvcmConfig, HvcmModel, RidgePolicy
from hvcm.feature_store import FormatError

MAGIC = b"HVCM"
VERSION = 1

_PREFIX = struct.Struct("<4sII")


def _tril_flat(matrix: np.ndarray) -> np.ndarray:
    k = matrix.shape[0]
    rows, cols = np.tril_indices(k)
    return matrix[rows, cols]


def _tril_unflat(flat: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((k, k))
    rows, cols = np.tril_indices(k)
    out[rows, cols] = flat
    return out


def save_model(model: HvcmModel, path: str | os.PathLike) -> None:
    cfg = model.config
    if cfg.head is None:
        raise ValueError("model has no affine projection head; the HVCM format requires one")
    header = {
        "G": cfg.n_groups,
        "d": cfg.attribute_dim,
        "q": cfg.feature_dim,
        "C": model.n_classes,
        "stats_mode": cfg.stats_mode,
        "ridge_policy": cfg.ridge_policy.to_json(),
        "threshold": model.threshold,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for cm in model.classes:
            for w, comp in zip(cm.weights, cm.components):
                fh.write(struct.pack("<d", float(w)))
                fh.write(np.asarray(comp.mu, dtype="<f8").tobytes())
                fh.write(_tril_flat(comp.chol).astype("<f8").tobytes())
        fh.write(np.asarray(cfg.head.weight, dtype="<f8").tobytes())
        fh.write(np.asarray(cfg.head.bias, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_model(path: str | os.PathLike) -> HvcmModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise FormatError("truncated model header")
    magic, version, json_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported HVCM version {version}")
    offset = _PREFIX.size
    try:
        header = json.loads(raw[offset : offset + json_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad config header: {exc}") from exc
    offset += json_len

    n_groups, d, q, n_classes = header["G"], header["d"], header["q"], header["C"]
    k = d // n_groups
    tril = k * (k + 1) // 2
    per_comp = 1 + k + tril
    need = 8 * (n_classes * n_groups * per_comp + d * q + d)
    if len(raw) != offset + need:
        raise FormatError(f"payload length mismatch: expected {need} bytes, got {len(raw) - offset}")

    body = np.frombuffer(raw, dtype="<f8", offset=offset)
    pos = 0
    classes = []
    for cid in range(n_classes):
        weights = np.empty(n_groups)
        components = []
        for i in range(n_groups):
            weights[i] = body[pos]
            mu = body[pos + 1 : pos + 1 + k].copy()
            chol = _tril_unflat(body[pos + 1 + k : pos + per_comp], k)
            components.append(GroupGaussian(mu=mu, chol=chol, ridge=0.0, sigma=None))
            pos += per_comp
        classes.append(ClassModel(class_id=cid, components=components, weights=weights))
    head_w = body[pos : pos + d * q].reshape(d, q).copy()
    head_b = body[pos + d * q : pos + d * q + d].copy()

    config = HvcmConfig(
        n_groups=n_groups,
        attribute_dim=d,
        feature_dim=q,
        stats_mode=header["stats_mode"],
        ridge_policy=RidgePolicy.from_json(header["ridge_policy"]),
        head=ProjectionHead(weight=head_w, bias=head_b),
    )
    return HvcmModel(classes=classes, config=config, threshold=header["threshold"], frozen=True)
