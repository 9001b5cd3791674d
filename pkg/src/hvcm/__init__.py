"""Hierarchical visual category modeling for out-of-distribution detection.

Per-class grouped Gaussian density models over a projected attribute space,
a Mahalanobis-based in-distribution score, a toy-scale joint trainer, and an
evaluation harness (AUROC, FPR95, threshold sweeps, near-to-far ranking).
"""

from hvcm.feature_store import FeatureDataset, load_features, save_features, split, validate
from hvcm.attribute_space import GroupedAttributes, ProjectionHead, group, normalize_group, project
from hvcm.class_density import (
    ClassModel,
    GroupGaussian,
    HvcmConfig,
    HvcmModel,
    RidgePolicy,
    class_score,
    classify_cosine,
    dataset_score,
    detect,
    fit_class,
    freeze,
    log_density,
    mahalanobis,
)
from hvcm.model_io import load_model, save_model

__all__ = [
    "FeatureDataset",
    "load_features",
    "save_features",
    "split",
    "validate",
    "GroupedAttributes",
    "ProjectionHead",
    "group",
    "normalize_group",
    "project",
    "ClassModel",
    "GroupGaussian",
    "HvcmConfig",
    "HvcmModel",
    "RidgePolicy",
    "class_score",
    "classify_cosine",
    "dataset_score",
    "detect",
    "fit_class",
    "freeze",
    "log_density",
    "mahalanobis",
    "load_model",
    "save_model",
]
