"""Writers for the HVCF feature format.

The byte layout is the feature-store contract of the density-model package:
magic ``HVCF``, u32 version=1, u32 n, u32 dim, u32 c_max, u8 has_labels,
then n little-endian i32 labels, then n*dim little-endian f32 features.
This module writes those bytes directly; it deliberately does not import
the consumer package. Features are passed through untouched (no
normalization or projection) so all modeling decisions stay downstream.
"""

from __future__ import annotations

import os
import struct
from collections.abc import Callable

import numpy as np

from hvcm_exporter.manifest import ExportManifest

_HEADER = struct.Struct("<4sIIIIB")
_MAGIC = b"HVCF"
_VERSION = 1

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".gif")


class ExportError(RuntimeError):
    pass


def _write_hvcf(path: str, data: np.ndarray, labels: np.ndarray, c_max: int) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype="<i4")
    header = _HEADER.pack(_MAGIC, _VERSION, data.shape[0], data.shape[1], c_max, 1)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(labels.tobytes())
        fh.write(data.tobytes())
    os.replace(tmp, path)


def export_arrays(manifest: ExportManifest, arrays: dict[str, np.ndarray]) -> str:
    """Write per-class matrices as one labeled HVCF file; returns the path."""
    if manifest.source_kind != "array-dump":
        raise ExportError(f"manifest source_kind is {manifest.source_kind!r}, "
                          "expected 'array-dump'")
    unknown = set(arrays) - set(manifest.label_map)
    if unknown:
        raise ExportError(f"classes missing from the label map: {sorted(unknown)}")

    blocks, labels = [], []
    dim = None
    for name in sorted(arrays, key=lambda n: manifest.label_map[n]):
        block = np.asarray(arrays[name], dtype=np.float64)
        if block.ndim != 2:
            raise ExportError(f"class {name!r}: expected a 2-D matrix, "
                              f"got shape {block.shape}")
        if dim is None:
            dim = block.shape[1]
        elif block.shape[1] != dim:
            raise ExportError(f"class {name!r} has {block.shape[1]} columns, "
                              f"expected {dim}")
        if not np.isfinite(block).all():
            raise ExportError(f"class {name!r} contains non-finite entries")
        blocks.append(block.astype(np.float32))
        labels.append(np.full(block.shape[0], manifest.label_map[name], np.int32))
    if dim is None:
        raise ExportError("no arrays to export")

    _write_hvcf(manifest.output_path, np.vstack(blocks),
                np.concatenate(labels), manifest.n_classes)
    return manifest.output_path


def _torchvision_embed(manifest: ExportManifest) -> Callable:
    try:
        import torch
        import torchvision
        from torchvision.models.feature_extraction import create_feature_extractor
    except ImportError as exc:
        raise ExportError("image export needs torch and torchvision "
                          "(install the 'backbone' extra)") from exc
    try:
        model = torchvision.models.get_model(manifest.backbone, weights="DEFAULT")
    except Exception as exc:
        raise ExportError(f"missing backbone weights for {manifest.backbone!r}: "
                          f"{exc}") from exc
    model.eval()
    extractor = create_feature_extractor(model, [manifest.layer])
    weights = torchvision.models.get_model_weights(manifest.backbone).DEFAULT
    preprocess = weights.transforms()

    def embed(images: list) -> np.ndarray:
        batch = torch.stack([preprocess(img) for img in images])
        with torch.no_grad():
            out = extractor(batch)[manifest.layer]
        return out.flatten(start_dim=1).numpy()

    return embed


def export_images(manifest: ExportManifest, folder: str,
                  embed_fn: Callable | None = None,
                  batch_size: int = 32) -> str:
    """Embed an image folder (one subfolder per class) into a labeled HVCF file.

    ``embed_fn`` maps a list of PIL images to a (n, dim) array; when omitted
    a pretrained torchvision backbone named by the manifest is used.
    """
    if manifest.source_kind != "image-folder":
        raise ExportError(f"manifest source_kind is {manifest.source_kind!r}, "
                          "expected 'image-folder'")
    try:
        from PIL import Image
    except ImportError as exc:
        raise ExportError("image export needs Pillow "
                          "(install the 'images' extra)") from exc

    paths, labels = [], []
    for name in sorted(manifest.label_map, key=manifest.label_map.get):
        class_dir = os.path.join(folder, name)
        if not os.path.isdir(class_dir):
            raise ExportError(f"class folder not found: {class_dir}")
        files = sorted(f for f in os.listdir(class_dir)
                       if f.lower().endswith(IMAGE_EXTENSIONS))
        if not files:
            raise ExportError(f"no images in {class_dir}")
        paths += [os.path.join(class_dir, f) for f in files]
        labels += [manifest.label_map[name]] * len(files)

    if embed_fn is None:
        embed_fn = _torchvision_embed(manifest)

    blocks = []
    for start in range(0, len(paths), batch_size):
        chunk = paths[start : start + batch_size]
        images = []
        for p in chunk:
            try:
                with Image.open(p) as img:
                    images.append(img.convert("RGB"))
            except OSError as exc:
                raise ExportError(f"unreadable image {p}: {exc}") from exc
        block = np.asarray(embed_fn(images), dtype=np.float64)
        if block.ndim != 2 or block.shape[0] != len(images):
            raise ExportError(f"embed_fn returned shape {block.shape} "
                              f"for {len(images)} images")
        if not np.isfinite(block).all():
            raise ExportError("embedding contains non-finite entries")
        blocks.append(block.astype(np.float32))
    data = np.vstack(blocks)
    if len({b.shape[1] for b in blocks}) != 1:
        raise ExportError("embed_fn returned inconsistent dimensions")

    _write_hvcf(manifest.output_path, data,
                np.asarray(labels, np.int32), manifest.n_classes)
    return manifest.output_path
