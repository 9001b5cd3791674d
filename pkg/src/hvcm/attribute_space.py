"""Attribute-space projection, grouping, and per-group softmax normalization.

Backbone features z (length q) are mapped by an affine head into a
d-dimensional attribute vector, which is partitioned into G contiguous
sub-vectors of length d/G. Grouping is contiguous chunking: any fixed
permutation is equivalent up to relabeling, so the simplest deterministic
rule is used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ProjectionHead:
    """Affine map feature (q,) -> attribute (d,). Immutable after construction."""

    weight: np.ndarray  # (d, q) float64
    bias: np.ndarray    # (d,) float64

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("weight must be (d, q) with bias of length d")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ValueError("projection head entries must be finite")

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "ProjectionHead":
        return cls(weight=np.eye(dim), bias=np.zeros(dim))

    @property
    def is_identity(self) -> bool:
        d, q = self.weight.shape
        return d == q and not self.bias.any() and np.array_equal(self.weight, np.eye(d))


@dataclass
class GroupedAttributes:
    """A d-vector split into G rows of length d/G; rows are the sub-vectors."""

    groups: np.ndarray  # (G, d/G) float64
    normalized: bool = False

    def __post_init__(self):
        self.groups = np.asarray(self.groups, dtype=np.float64)
        if self.groups.ndim != 2:
            raise ValueError("groups must be a (G, d/G) array")

    @property
    def n_groups(self) -> int:
        return self.groups.shape[0]

    @property
    def group_dim(self) -> int:
        return self.groups.shape[1]

    def concat(self) -> np.ndarray:
        return self.groups.reshape(-1)


def project(head: ProjectionHead, feature: np.ndarray) -> np.ndarray:
    """W @ z + b for a single feature vector."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != (head.input_dim,):
        raise ValueError(f"feature length {feature.shape} does not match head input {head.input_dim}")
    if not np.isfinite(feature).all():
        raise ValueError("feature must be finite")
    return head.weight @ feature + head.bias


def project_batch(head: ProjectionHead, features: np.ndarray) -> np.ndarray:
    """Row-wise projection of an (n, q) matrix to (n, d)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != head.input_dim:
        raise ValueError(f"expected (n, {head.input_dim}) features, got {features.shape}")
    return features @ head.weight.T + head.bias


def group(attribute: np.ndarray, n_groups: int) -> GroupedAttributes:
    """Split a d-vector into n_groups contiguous chunks of length d/n_groups."""
    attribute = np.asarray(attribute, dtype=np.float64)
    d = attribute.shape[-1]
    if attribute.ndim != 1:
        raise ValueError("attribute must be a vector")
    if n_groups < 1 or d % n_groups:
        raise ValueError(f"group count {n_groups} does not divide attribute dimension {d}")
    return GroupedAttributes(groups=attribute.reshape(n_groups, d // n_groups))


def group_batch(attributes: np.ndarray, n_groups: int) -> np.ndarray:
    """(n, d) -> (n, G, d/G) contiguous chunking."""
    attributes = np.asarray(attributes, dtype=np.float64)
    n, d = attributes.shape
    if d % n_groups:
        raise ValueError(f"group count {n_groups} does not divide attribute dimension {d}")
    return attributes.reshape(n, n_groups, d // n_groups)


def softmax(x: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax; overflow-safe for any finite input."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(x, dtype=np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def normalize_group(sub: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Softmax a single sub-vector into a probability vector."""
    sub = np.asarray(sub, dtype=np.float64)
    if not np.isfinite(sub).all():
        raise ValueError("sub-vector must be finite")
    return softmax(sub, temperature=temperature)


def normalize_grouped(ga: GroupedAttributes, temperature: float = 1.0) -> GroupedAttributes:
    """Apply per-group softmax to every sub-vector."""
    return GroupedAttributes(groups=softmax(ga.groups, temperature=temperature, axis=1), normalized=True)
