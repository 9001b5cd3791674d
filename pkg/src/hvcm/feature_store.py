"""Labeled feature datasets and the HVCF on-disk format.

HVCF layout (all little-endian): magic ``HVCF``, u32 version=1, u32 n,
u32 dim, u32 c_max, u8 has_labels, then n i32 labels (if has_labels),
then n*dim f32 payload. Label -1 marks unlabeled/OOD rows, so the same
format serves InD train, InD test, and OOD test sets.

Payload is stored as float32 for economy; downstream statistics always
accumulate in float64.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"HVCF"
VERSION = 1

_HEADER = struct.Struct("<4sIIIIB")


class FormatError(ValueError):
    """Malformed or truncated HVCF/CSV input."""


class ValidationError(ValueError):
    """Dataset fails the validity contract (non-finite data, bad labels)."""


@dataclass
class FeatureDataset:
    data: np.ndarray                  # (n, dim) float32, row-major
    labels: np.ndarray | None = None  # (n,) int32, -1 = unlabeled/OOD
    c_max: int = 0
    name: str = ""

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValidationError("feature data must be a 2-D array")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
            if self.labels.shape != (self.data.shape[0],):
                raise ValidationError("label count does not match row count")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        labels_equal = self.labels is None or np.array_equal(self.labels, other.labels)
        return (
            labels_equal
            and self.c_max == other.c_max
            and self.data.shape == other.data.shape
            and np.array_equal(
                self.data.view(np.uint32), other.data.view(np.uint32)
            )  # bit-exact, NaN-safe
        )


@dataclass
class ValidationReport:
    n: int
    dim: int
    nan_rows: list[int] = field(default_factory=list)
    inf_rows: list[int] = field(default_factory=list)
    bad_label_rows: list[int] = field(default_factory=list)
    class_counts: dict[int, int] = field(default_factory=dict)
    ood_count: int = 0

    @property
    def ok(self) -> bool:
        return not (self.nan_rows or self.inf_rows or self.bad_label_rows)


def validate(dataset: FeatureDataset) -> ValidationReport:
    """Report-only check: non-finite rows, label range, per-class counts N_c."""
    report = ValidationReport(n=dataset.n, dim=dataset.dim)
    if dataset.n:
        report.nan_rows = np.flatnonzero(np.isnan(dataset.data).any(axis=1)).tolist()
        report.inf_rows = np.flatnonzero(np.isinf(dataset.data).any(axis=1)).tolist()
    if dataset.labels is not None and dataset.n:
        labels = dataset.labels
        bad = (labels < -1) | (labels >= dataset.c_max)
        report.bad_label_rows = np.flatnonzero(bad).tolist()
        report.ood_count = int((labels == -1).sum())
        values, counts = np.unique(labels[labels >= 0], return_counts=True)
        report.class_counts = {int(v): int(c) for v, c in zip(values, counts)}
    return report


def save_features(dataset: FeatureDataset, path: str | os.PathLike) -> None:
    """Write the canonical binary format. Refuses datasets with defects."""
    report = validate(dataset)
    if not report.ok:
        raise ValidationError(
            f"refusing to write defective dataset: {len(report.nan_rows)} NaN rows, "
            f"{len(report.inf_rows)} Inf rows, {len(report.bad_label_rows)} bad labels"
        )
    has_labels = dataset.labels is not None
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, dataset.n, dataset.dim, dataset.c_max, int(has_labels)))
        if has_labels:
            fh.write(dataset.labels.astype("<i4", copy=False).tobytes())
        fh.write(dataset.data.astype("<f4", copy=False).tobytes())
    os.replace(tmp, path)


def _load_binary(path) -> FeatureDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header")
    magic, version, n, dim, c_max, has_labels = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported HVCF version {version}")
    offset = _HEADER.size
    labels = None
    if has_labels:
        end = offset + 4 * n
        if len(raw) < end:
            raise FormatError("truncated label block")
        labels = np.frombuffer(raw, dtype="<i4", count=n, offset=offset).copy()
        offset = end
    payload_bytes = 4 * n * dim
    if len(raw) != offset + payload_bytes:
        raise FormatError(
            f"payload length mismatch: expected {payload_bytes} bytes, got {len(raw) - offset}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=offset).reshape(n, dim).copy()
    ds = FeatureDataset(data=data, labels=labels, c_max=c_max, name=os.path.basename(str(path)))
    if labels is not None:
        bad = (labels < -1) | (labels >= c_max)
        if bad.any():
            raise FormatError(f"label out of declared range at row {int(np.flatnonzero(bad)[0])}")
    return ds


def _load_csv(path) -> FeatureDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError("empty CSV")
    header = rows[0]
    has_labels = bool(header) and header[0].strip().lower() == "label"
    start_col = 1 if has_labels else 0
    width = len(header) - start_col
    labels = [] if has_labels else None
    data = []
    for idx, row in enumerate(rows[1:]):
        if len(row) - start_col != width:
            raise FormatError(f"CSV row {idx} has {len(row) - start_col} features, expected {width}")
        try:
            if has_labels:
                labels.append(int(row[0]))
            data.append([float(v) for v in row[start_col:]])
        except ValueError as exc:
            raise FormatError(f"CSV row {idx}: {exc}") from exc
    matrix = np.asarray(data, dtype=np.float32).reshape(len(data), width)
    label_arr = np.asarray(labels, dtype=np.int32) if has_labels else None
    c_max = int(label_arr.max()) + 1 if has_labels and len(label_arr) and label_arr.max() >= 0 else 0
    return FeatureDataset(data=matrix, labels=label_arr, c_max=c_max, name=os.path.basename(str(path)))


def load_features(path: str | os.PathLike, format: str = "binary") -> FeatureDataset:
    """Load a dataset; ``format`` is ``binary`` (canonical) or ``csv``."""
    if not os.path.exists(path):
        raise FormatError(f"no such file: {path}")
    if format == "binary":
        return _load_binary(path)
    if format == "csv":
        return _load_csv(path)
    raise ValueError(f"unknown format {format!r}")


def split(dataset: FeatureDataset, fraction: float, seed: int) -> tuple[FeatureDataset, FeatureDataset]:
    """Deterministic stratified split; the parts partition the rows."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0,1), got {fraction}")
    if dataset.n < 2:
        raise ValueError("need at least 2 rows to split")
    rng = np.random.default_rng(seed)
    labels = dataset.labels if dataset.labels is not None else np.zeros(dataset.n, dtype=np.int32)
    first_idx = []
    second_idx = []
    for value in np.unique(labels):
        members = np.flatnonzero(labels == value)
        perm = rng.permutation(members)
        take = int(round(fraction * len(members)))
        first_idx.append(perm[:take])
        second_idx.append(perm[take:])
    first = np.sort(np.concatenate(first_idx)).astype(np.int64)
    second = np.sort(np.concatenate(second_idx)).astype(np.int64)

    def subset(idx):
        return FeatureDataset(
            data=dataset.data[idx],
            labels=dataset.labels[idx] if dataset.labels is not None else None,
            c_max=dataset.c_max,
            name=dataset.name,
        )

    return subset(first), subset(second)
