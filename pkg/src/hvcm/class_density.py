"""Per-class grouped Gaussian models and the Mahalanobis score cascade.

Each class c is modeled by G Gaussian components, one per attribute group,
mixed with nonnegative weights that sum to one. Scoring is the weighted sum
of negative squared Mahalanobis distances per group; the dataset-level score
is the maximum over classes (nearest category). All statistics accumulate in
float64 and all solves go through a cached Cholesky factor; explicit inverses
appear only in test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from hvcm.attribute_space import GroupedAttributes, ProjectionHead, group_batch, softmax

STATS_MODES = ("raw", "softmax")


class DegenerateFitError(RuntimeError):
    """Covariance could not be factorized even after ridge escalation."""


@dataclass
class RidgePolicy:
    """ridge = max(floor, rel * mean diagonal); escalates x10 on failure."""

    floor: float = 1e-6
    rel: float = 1e-3
    max_escalations: int = 3

    def initial(self, sigma: np.ndarray) -> float:
        k = sigma.shape[0]
        return max(self.floor, self.rel * float(np.trace(sigma)) / k)

    def to_json(self) -> dict:
        return {"floor": self.floor, "rel": self.rel, "max_escalations": self.max_escalations}

    @classmethod
    def from_json(cls, obj: dict) -> "RidgePolicy":
        return cls(**obj)


@dataclass
class GroupGaussian:
    """One group's Gaussian: mean, covariance, and the factor of sigma + ridge*I."""

    mu: np.ndarray               # (k,)
    chol: np.ndarray             # (k, k) lower triangular, positive diagonal
    ridge: float
    sigma: np.ndarray | None = None  # None for models restored from disk

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass
class ClassModel:
    class_id: int
    components: list[GroupGaussian]
    weights: np.ndarray  # (G,) nonnegative, sums to 1

    @property
    def n_groups(self) -> int:
        return len(self.components)

    def center_vector(self) -> np.ndarray:
        """Concatenation of the G group means (length d)."""
        return np.concatenate([c.mu for c in self.components])


@dataclass
class HvcmConfig:
    n_groups: int
    attribute_dim: int                 # d
    feature_dim: int                   # q
    stats_mode: str = "raw"
    ridge_policy: RidgePolicy = field(default_factory=RidgePolicy)
    head: ProjectionHead | None = None

    def __post_init__(self):
        if self.stats_mode not in STATS_MODES:
            raise ValueError(f"stats_mode must be one of {STATS_MODES}, got {self.stats_mode!r}")
        if self.attribute_dim % self.n_groups:
            raise ValueError(
                f"group count {self.n_groups} does not divide attribute dim {self.attribute_dim}"
            )

    @property
    def group_dim(self) -> int:
        return self.attribute_dim // self.n_groups


@dataclass
class HvcmModel:
    classes: list[ClassModel]
    config: HvcmConfig
    threshold: float | None = None
    frozen: bool = False

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def center_matrix(self) -> np.ndarray:
        """(C, d) concatenated group centers, row per class."""
        return np.stack([cm.center_vector() for cm in self.classes])


def _as_stack(attrs) -> np.ndarray:
    """Accept a list of GroupedAttributes or an (N, G, k) array."""
    if isinstance(attrs, np.ndarray):
        if attrs.ndim != 3:
            raise ValueError("expected an (N, G, k) array")
        return np.asarray(attrs, dtype=np.float64)
    return np.stack([ga.groups for ga in attrs]).astype(np.float64)


def _factorize(sigma: np.ndarray, policy: RidgePolicy) -> tuple[np.ndarray, float]:
    ridge = policy.initial(sigma)
    k = sigma.shape[0]
    for _ in range(policy.max_escalations + 1):
        try:
            chol = np.linalg.cholesky(sigma + ridge * np.eye(k))
            return chol, ridge
        except np.linalg.LinAlgError:
            ridge *= 10.0
    raise DegenerateFitError(f"covariance not factorizable at ridge {ridge / 10.0:g}")


def fit_class(
    attrs,
    weights: np.ndarray,
    ridge_policy: RidgePolicy | None = None,
    class_id: int = 0,
) -> ClassModel:
    """Sample mean and unbiased covariance per group, plus the ridge factor.

    ``attrs`` is a list of GroupedAttributes (or a stacked (N, G, k) array)
    for one class. N=1 classes get sigma = 0 + ridge*I rather than failing.
    """
    policy = ridge_policy or RidgePolicy()
    stack = _as_stack(attrs)
    n, n_groups, k = stack.shape
    if n < 1:
        raise ValueError("fit_class needs at least one sample")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n_groups,) or (weights < 0).any() or weights.sum() <= 0:
        raise ValueError("weights must be G nonnegative scalars with positive sum")
    weights = weights / weights.sum()

    components = []
    for i in range(n_groups):
        block = stack[:, i, :]
        mu = block.mean(axis=0)
        if n > 1:
            centered = block - mu
            sigma = centered.T @ centered / (n - 1)
            sigma = 0.5 * (sigma + sigma.T)  # kill roundoff asymmetry
        else:
            sigma = np.zeros((k, k))
        chol, ridge = _factorize(sigma, policy)
        components.append(GroupGaussian(mu=mu, chol=chol, ridge=ridge, sigma=sigma))
    return ClassModel(class_id=class_id, components=components, weights=weights)


def mahalanobis(comp: GroupGaussian, sub: np.ndarray) -> float:
    """-(x-mu)^T (sigma + ridge*I)^{-1} (x-mu) via triangular solve; <= 0."""
    sub = np.asarray(sub, dtype=np.float64)
    if sub.shape != comp.mu.shape:
        raise ValueError(f"sub-vector shape {sub.shape} does not match mean {comp.mu.shape}")
    y = solve_triangular(comp.chol, sub - comp.mu, lower=True)
    return -float(y @ y)


def mahalanobis_batch(comp: GroupGaussian, subs: np.ndarray) -> np.ndarray:
    """Vectorized mahalanobis over an (N, k) block; returns (N,)."""
    subs = np.asarray(subs, dtype=np.float64)
    y = solve_triangular(comp.chol, (subs - comp.mu).T, lower=True)
    return -np.einsum("km,km->m", y, y)


def class_score(cm: ClassModel, ga: GroupedAttributes) -> float:
    """Weighted sum of per-group Mahalanobis scores; 0 iff at all centers."""
    if ga.n_groups != cm.n_groups:
        raise ValueError(f"sample has {ga.n_groups} groups, model has {cm.n_groups}")
    return float(
        sum(w * mahalanobis(comp, sub) for w, comp, sub in zip(cm.weights, cm.components, ga.groups))
    )


def class_score_batch(cm: ClassModel, stack: np.ndarray) -> np.ndarray:
    """(N, G, k) -> (N,) weighted group scores."""
    total = np.zeros(stack.shape[0])
    for i, comp in enumerate(cm.components):
        total += cm.weights[i] * mahalanobis_batch(comp, stack[:, i, :])
    return total


def dataset_score(model: HvcmModel, ga: GroupedAttributes) -> tuple[float, int]:
    """Max class score and the achieving class; ties go to the lowest id."""
    if not model.classes:
        raise ValueError("model has no classes")
    scores = np.array([class_score(cm, ga) for cm in model.classes])
    best = int(np.argmax(scores))
    return float(scores[best]), model.classes[best].class_id


def dataset_score_batch(model: HvcmModel, stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(N, G, k) -> (scores (N,), argmax class ids (N,))."""
    if not model.classes:
        raise ValueError("model has no classes")
    per_class = np.stack([class_score_batch(cm, stack) for cm in model.classes])
    best = per_class.argmax(axis=0)
    ids = np.array([cm.class_id for cm in model.classes])
    return per_class[best, np.arange(stack.shape[0])], ids[best]


def detect(model: HvcmModel, score: float) -> str:
    """'InD' iff score >= threshold (inclusive boundary), else 'OOD'."""
    if model.threshold is None:
        raise ValueError("model threshold is unset; calibrate first")
    return "InD" if score >= model.threshold else "OOD"


def log_density(cm: ClassModel, ga: GroupedAttributes) -> float:
    """Diagnostic log of the grouped mixture value via log-sum-exp.

    Not a normalized density over R^d (components live in different
    subspaces); intended for small group dims where the log-determinant
    from the factor diagonal is stable.
    """
    if ga.n_groups != cm.n_groups:
        raise ValueError("group shape mismatch")
    log_terms = np.empty(cm.n_groups)
    for i, comp in enumerate(cm.components):
        k = comp.dim
        quad = -mahalanobis(comp, ga.groups[i])
        logdet = 2.0 * np.log(np.diag(comp.chol)).sum()
        log_terms[i] = -0.5 * (k * np.log(2.0 * np.pi) + logdet + quad)
    return float(logsumexp(log_terms, b=cm.weights))


def classify_cosine(model: HvcmModel, attribute: np.ndarray) -> int:
    """Argmax cosine similarity against concatenated class centers."""
    return int(classify_cosine_batch(model, np.asarray(attribute, dtype=np.float64)[None, :])[0])


def classify_cosine_batch(model: HvcmModel, attributes: np.ndarray) -> np.ndarray:
    attributes = np.asarray(attributes, dtype=np.float64)
    norms = np.linalg.norm(attributes, axis=1)
    if (norms == 0).any():
        raise ValueError("zero-norm attribute vector")
    centers = model.center_matrix()
    center_norms = np.linalg.norm(centers, axis=1)
    if (center_norms == 0).any():
        raise ValueError("zero-norm class center")
    sims = (attributes / norms[:, None]) @ (centers / center_norms[:, None]).T
    ids = np.array([cm.class_id for cm in model.classes])
    return ids[sims.argmax(axis=1)]


def prepare_groups(config: HvcmConfig, attributes: np.ndarray) -> np.ndarray:
    """(n, d) attributes -> (n, G, k) stack, softmaxed when the mode asks."""
    stack = group_batch(attributes, config.n_groups)
    if config.stats_mode == "softmax":
        stack = softmax(stack, axis=2)
    return stack


def freeze(
    class_attrs: dict[int, np.ndarray],
    weights: dict[int, np.ndarray] | None,
    config: HvcmConfig,
) -> HvcmModel:
    """Fit every class and return the immutable detector (threshold unset).

    ``class_attrs`` maps class id -> (N_c, d) raw attribute matrix; ids must
    be contiguous in [0, C). ``weights`` maps class id -> G-vector, or None
    for uniform. Weight vectors are renormalized to sum 1.
    """
    if not class_attrs:
        raise ValueError("no classes to freeze")
    ids = sorted(class_attrs)
    if ids != list(range(len(ids))):
        raise ValueError(f"class ids must be contiguous from 0, got {ids}")
    classes = []
    for cid in ids:
        attrs = np.asarray(class_attrs[cid], dtype=np.float64)
        if attrs.ndim != 2 or attrs.shape[0] < 1:
            raise ValueError(f"class {cid} is empty")
        stack = prepare_groups(config, attrs)
        w = np.full(config.n_groups, 1.0 / config.n_groups) if weights is None else weights[cid]
        classes.append(fit_class(stack, w, config.ridge_policy, class_id=cid))
    return HvcmModel(classes=classes, config=config, threshold=None, frozen=True)


def features_to_attributes(model: HvcmModel, features: np.ndarray) -> np.ndarray:
    """Map raw rows into attribute space: project q-dim rows, pass d-dim through."""
    features = np.asarray(features, dtype=np.float64)
    cfg = model.config
    if features.ndim != 2:
        raise ValueError("expected a 2-D feature matrix")
    if features.shape[1] == cfg.attribute_dim:
        return features
    if cfg.head is not None and features.shape[1] == cfg.feature_dim:
        from hvcm.attribute_space import project_batch

        return project_batch(cfg.head, features)
    raise ValueError(
        f"feature dim {features.shape[1]} matches neither attribute dim "
        f"{cfg.attribute_dim} nor feature dim {cfg.feature_dim}"
    )


def score_features(model: HvcmModel, features: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Score raw rows: project if they are q-dim, group, apply stats mode.

    Returns (scores, argmax ids, per-class score matrix (N, C)).
    """
    attributes = features_to_attributes(model, features)
    cfg = model.config
    stack = prepare_groups(cfg, attributes)
    per_class = np.stack([class_score_batch(cm, stack) for cm in model.classes], axis=1)
    best = per_class.argmax(axis=1)
    ids = np.array([cm.class_id for cm in model.classes])
    return per_class[np.arange(len(best)), best], ids[best], per_class
