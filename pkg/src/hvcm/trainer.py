"""Toy-scale joint representation learning and density-parameter optimization.

A small feedforward encoder (tanh hidden layers, linear output) is trained
with a three-term objective: self-distillation cross-entropy between an EMA
teacher and the student over augmented views, a per-group divergence pulling
softmax-normalized attributes toward their class centers, and a reversed,
weight-predicted divergence pulling centers toward attributes. Gradients are
computed analytically (hand backprop, float64) so they can be checked against
central finite differences.

Update rules: Adam for the student (and weight head) at rate gamma1 and for
the centers at rate gamma2; stored group weights move by EMA at rate gamma3
toward the batch-mean predicted weights of their class; the teacher tracks
the student by parameter EMA.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields

import numpy as np

from hvcm.attribute_space import ProjectionHead, log_softmax, softmax
from hvcm.class_density import HvcmConfig, HvcmModel, RidgePolicy, freeze

OBJECTIVES = ("L2", "KL", "JS")

_TINY = 1e-300  # log/ratio guard; softmax outputs can underflow to exact 0


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.1
    # The reference hyperparameters use gamma1 = gamma2 = 1 with a scheduled
    # full-scale optimizer; Adam at rate 1 diverges on the toy task, so the
    # defaults are smaller. All rates are configurable.
    gamma1: float = 0.01
    gamma2: float = 0.01
    gamma3: float = 1e-4
    teacher_momentum: float = 0.996
    tau_s: float = 0.1
    tau_t: float = 0.04
    objective: str = "KL"
    views: int = 2
    sigma_aug: float = 0.1
    p_mask: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    hidden: tuple[int, ...] = ()
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if isinstance(self.hidden, list):
            self.hidden = tuple(self.hidden)
        if self.tau_s <= 0 or self.tau_t <= 0:
            raise ValueError("tau_s and tau_t must be positive")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        for name in ("alpha", "beta", "gamma1", "gamma2", "gamma3", "sigma_aug", "p_mask"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.gamma3 <= 1.0:
            raise ValueError("gamma3 must lie in [0, 1]")
        if not 0.0 <= self.teacher_momentum < 1.0:
            raise ValueError("teacher_momentum must lie in [0, 1)")
        if self.views < 1:
            raise ValueError("views must be >= 1")

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class Encoder:
    """MLP with tanh hidden activations and a linear output layer."""

    weights: list[np.ndarray]  # layer l: (out_l, in_l) float64
    biases: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward_cached(self, x: np.ndarray) -> list[np.ndarray]:
        """Activations [h_0 .. h_L]; h_0 is the input, h_L the attribute output."""
        acts = [np.asarray(x, dtype=np.float64)]
        h = acts[0]
        last = self.n_layers - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = z if l == last else np.tanh(z)
            acts.append(h)
        return acts

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[-1]

    def copy(self) -> "Encoder":
        return Encoder([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class CenterBank:
    centers: np.ndarray  # (C, G, k) float64
    weights: np.ndarray  # (C, G), rows on the simplex
    head_w: np.ndarray   # (G, d) weight-prediction map over the attribute vector
    head_b: np.ndarray   # (G,)


@dataclass
class LossBreakdown:
    total: float
    kd: float
    align: float
    weighted: float


@dataclass
class Gradients:
    encoder: list[tuple[np.ndarray, np.ndarray]]
    head_w: np.ndarray
    head_b: np.ndarray
    centers: np.ndarray  # (C, G, k); zero for classes absent from the batch
    class_weight_means: dict[int, np.ndarray] = field(default_factory=dict)

    def norm(self) -> float:
        total = float(self.head_w.ravel() @ self.head_w.ravel())
        total += float(self.head_b @ self.head_b)
        total += float(self.centers.ravel() @ self.centers.ravel())
        for dw, db in self.encoder:
            total += float(dw.ravel() @ dw.ravel()) + float(db @ db)
        return float(np.sqrt(total))


@dataclass
class TrainState:
    student: Encoder
    teacher: Encoder
    bank: CenterBank
    opt: dict  # tensor name -> [first moment, second moment]
    step: int
    rng: np.random.Generator
    last_loss: LossBreakdown | None = None
    last_grad_norm: float = 0.0


# ---------------------------------------------------------------------------
# loss pieces


def augment_views(sample: np.ndarray, n_views: int, rng: np.random.Generator,
                  sigma_aug: float = 0.1, p_mask: float = 0.1) -> np.ndarray:
    """V perturbed copies: additive Gaussian noise plus coordinate masking."""
    if n_views < 2:
        raise ValueError("need at least 2 views")
    sample = np.asarray(sample, dtype=np.float64)
    views = np.repeat(sample[None, :], n_views, axis=0)
    if sigma_aug > 0:
        views = views + rng.normal(0.0, sigma_aug, size=views.shape)
    if p_mask > 0:
        views = np.where(rng.random(views.shape) < p_mask, 0.0, views)
    return views


def _augment_batch(x: np.ndarray, n_views: int, rng: np.random.Generator,
                   sigma_aug: float, p_mask: float) -> np.ndarray:
    """(B, q) -> (B, V, q), same recipe as augment_views."""
    views = np.repeat(x[:, None, :], n_views, axis=1).astype(np.float64)
    if sigma_aug > 0:
        views = views + rng.normal(0.0, sigma_aug, size=views.shape)
    if p_mask > 0:
        views = np.where(rng.random(views.shape) < p_mask, 0.0, views)
    return views


def kd_loss(student_attr: np.ndarray, teacher_attr: np.ndarray,
            tau_s: float, tau_t: float) -> float:
    """Cross-entropy of the student distribution under the (constant) teacher."""
    p_t = softmax(np.asarray(teacher_attr, dtype=np.float64), temperature=tau_t)
    ls_s = log_softmax(np.asarray(student_attr, dtype=np.float64), temperature=tau_s)
    return float(-(p_t @ ls_s))


def _divergence(p: np.ndarray, q: np.ndarray, objective: str):
    """D(p || q) elementwise over the last axis with gradients wrt both sides.

    p and q are probability vectors (broadcastable shapes ending in k).
    Returns (values, dvalues/dp, dvalues/dq).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if objective == "L2":
        diff = p - q
        return (diff * diff).sum(axis=-1), 2.0 * diff, -2.0 * diff
    if objective == "KL":
        lp = np.log(np.maximum(p, _TINY))
        lq = np.log(np.maximum(q, _TINY))
        vals = (p * (lp - lq)).sum(axis=-1)
        return vals, lp - lq + 1.0, -p / np.maximum(q, _TINY)
    if objective == "JS":
        m = 0.5 * (p + q)
        lp = np.log(np.maximum(p, _TINY))
        lq = np.log(np.maximum(q, _TINY))
        lm = np.log(np.maximum(m, _TINY))
        vals = 0.5 * (p * (lp - lm)).sum(axis=-1) + 0.5 * (q * (lq - lm)).sum(axis=-1)
        return vals, 0.5 * (lp - lm), 0.5 * (lq - lm)
    raise ValueError(f"unknown objective {objective!r}")


def _check_normalized(arr: np.ndarray, what: str) -> None:
    sums = arr.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-6) or (arr < 0).any():
        raise ValueError(f"{what} must be softmax-normalized probability vectors")


def center_align_loss(ga, centers: np.ndarray, objective: str = "KL") -> float:
    """Sum over groups of D(a_i || mu_i); both sides already normalized."""
    groups = ga.groups if hasattr(ga, "groups") else np.asarray(ga, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if objective in ("KL", "JS"):
        _check_normalized(groups, "attributes")
        _check_normalized(centers, "centers")
    vals, _, _ = _divergence(groups, centers, objective)
    return float(vals.sum())


def weighted_center_loss(ga, centers: np.ndarray, sample_weights: np.ndarray,
                         objective: str = "KL") -> float:
    """Sum over groups of w_i * D(mu_i || a_i) (direction reversed)."""
    groups = ga.groups if hasattr(ga, "groups") else np.asarray(ga, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    sample_weights = np.asarray(sample_weights, dtype=np.float64)
    if (sample_weights < 0).any() or abs(sample_weights.sum() - 1.0) > 1e-6:
        raise ValueError("sample weights must be nonnegative and sum to 1")
    if objective in ("KL", "JS"):
        _check_normalized(groups, "attributes")
        _check_normalized(centers, "centers")
    vals, _, _ = _divergence(centers, groups, objective)
    return float(sample_weights @ vals)


def _softmax_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Chain a gradient through softmax along the last axis."""
    inner = (probs * grad).sum(axis=-1, keepdims=True)
    return probs * (grad - inner)


def loss_and_grads(views: np.ndarray, labels: np.ndarray, student: Encoder,
                   teacher: Encoder, bank: CenterBank,
                   config: TrainConfig) -> tuple[LossBreakdown, Gradients]:
    """Full objective over a batch of views with analytic gradients.

    ``views`` is (B, V, q); the teacher branch is a constant (stop-gradient).
    """
    views = np.asarray(views, dtype=np.float64)
    labels = np.asarray(labels)
    n_batch, n_views, _ = views.shape
    if (labels < 0).any():
        raise ValueError("batch contains unlabeled samples")
    n_classes, n_groups, group_dim = bank.centers.shape
    if (labels >= n_classes).any():
        raise ValueError("batch label out of range")
    d = student.output_dim
    n_rows = n_batch * n_views
    flat = views.reshape(n_rows, -1)
    row_labels = np.repeat(labels, n_views)

    acts = student.forward_cached(flat)
    attrs = acts[-1]                                # (R, d)
    t_attrs = teacher.forward(flat)                 # (R, d), constant

    d_attrs = np.zeros_like(attrs)

    # --- self-distillation over ordered view pairs -------------------------
    loss_kd = 0.0
    if n_views >= 2:
        a3 = attrs.reshape(n_batch, n_views, d)
        t3 = t_attrs.reshape(n_batch, n_views, d)
        p_t = softmax(t3, temperature=config.tau_t, axis=2)
        ls_s = log_softmax(a3, temperature=config.tau_s, axis=2)
        p_s = np.exp(ls_s)
        n_pairs = n_views * (n_views - 1)
        sum_t = p_t.sum(axis=1, keepdims=True)                       # (B, 1, d)
        cross = -(sum_t * ls_s).sum(axis=(1, 2)) + (p_t * ls_s).sum(axis=(1, 2))
        loss_kd = float(cross.mean() / n_pairs)
        g = ((n_views - 1) * p_s - (sum_t - p_t)) / (config.tau_s * n_pairs * n_batch)
        d_attrs += g.reshape(n_rows, d)

    # --- center terms on softmax-normalized groups -------------------------
    grouped = attrs.reshape(n_rows, n_groups, group_dim)
    a_norm = softmax(grouped, axis=2)                               # (R, G, k)
    mu_norm = softmax(bank.centers, axis=2)                         # (C, G, k)
    mu_rows = mu_norm[row_labels]                                   # (R, G, k)

    scale = 1.0 / n_rows  # mean over samples and views

    align_vals, align_dp, align_dq = _divergence(a_norm, mu_rows, config.objective)
    loss_align = float(align_vals.sum() * scale)

    w_logits = attrs @ bank.head_w.T + bank.head_b                  # (R, G)
    w_pred = softmax(w_logits, axis=1)
    rev_vals, rev_dp, rev_dq = _divergence(mu_rows, a_norm, config.objective)
    loss_weighted = float((w_pred * rev_vals).sum() * scale)

    total = loss_kd + config.alpha * loss_align + config.beta * loss_weighted

    # gradient into normalized attributes, then through the group softmax
    d_a_norm = config.alpha * scale * align_dp
    d_a_norm += config.beta * scale * w_pred[:, :, None] * rev_dq
    d_attrs += _softmax_backward(a_norm, d_a_norm).reshape(n_rows, d)

    # gradient through the predicted weights (head and its input attribute)
    g_w = config.beta * scale * rev_vals                            # (R, G)
    d_logits = _softmax_backward(w_pred, g_w)
    d_head_w = d_logits.T @ attrs
    d_head_b = d_logits.sum(axis=0)
    d_attrs += d_logits @ bank.head_w

    # gradient into normalized centers, scattered per class
    d_mu_rows = config.alpha * scale * align_dq
    d_mu_rows += config.beta * scale * w_pred[:, :, None] * rev_dp
    d_mu_norm = np.zeros_like(mu_norm)
    np.add.at(d_mu_norm, row_labels, d_mu_rows)
    d_centers = _softmax_backward(mu_norm, d_mu_norm)

    # --- backprop through the student MLP ----------------------------------
    encoder_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * student.n_layers
    delta = d_attrs
    for l in range(student.n_layers - 1, -1, -1):
        encoder_grads[l] = (delta.T @ acts[l], delta.sum(axis=0))
        if l > 0:
            delta = (delta @ student.weights[l]) * (1.0 - acts[l] ** 2)

    weight_means = {
        int(c): w_pred[row_labels == c].mean(axis=0) for c in np.unique(labels)
    }
    grads = Gradients(
        encoder=encoder_grads,
        head_w=d_head_w,
        head_b=d_head_b,
        centers=d_centers,
        class_weight_means=weight_means,
    )
    return LossBreakdown(total=total, kd=loss_kd, align=loss_align, weighted=loss_weighted), grads


def total_loss(batch, state: TrainState, config: TrainConfig,
               views: np.ndarray | None = None) -> tuple[float, Gradients]:
    """Augment the batch (consuming state.rng) and evaluate loss + gradients.

    ``batch`` is (features (B, q), labels (B,)); precomputed ``views`` skip
    the augmentation, which finite-difference checks rely on.
    """
    x, labels = batch
    x = np.asarray(x, dtype=np.float64)
    if views is None:
        views = _augment_batch(x, config.views, state.rng, config.sigma_aug, config.p_mask)
    breakdown, grads = loss_and_grads(views, labels, state.student, state.teacher,
                                      state.bank, config)
    return breakdown.total, grads


# ---------------------------------------------------------------------------
# optimization


def _adam_update(param: np.ndarray, grad: np.ndarray, slot: list, lr: float,
                 step: int, config: TrainConfig) -> None:
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    slot[0] = b1 * slot[0] + (1.0 - b1) * grad
    slot[1] = b2 * slot[1] + (1.0 - b2) * grad * grad
    if lr == 0.0:
        return
    m_hat = slot[0] / (1.0 - b1 ** step)
    v_hat = slot[1] / (1.0 - b2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


def init_state(config: TrainConfig, dims: tuple[int, int, int, int],
               rng: np.random.Generator) -> TrainState:
    """Fresh state; dims = (input_dim, attribute_dim, n_groups, n_classes)."""
    q_in, d, n_groups, n_classes = dims
    if d % n_groups:
        raise ValueError(f"group count {n_groups} does not divide attribute dim {d}")
    sizes = [q_in, *config.hidden, d]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)))
        biases.append(rng.normal(0.0, 0.01, size=fan_out))
    student = Encoder(weights, biases)
    bank = CenterBank(
        centers=rng.normal(0.0, 1.0, size=(n_classes, n_groups, d // n_groups)),
        weights=np.full((n_classes, n_groups), 1.0 / n_groups),
        head_w=rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_groups, d)),
        head_b=np.zeros(n_groups),
    )
    opt = {}
    for l in range(student.n_layers):
        opt[f"w{l}"] = [np.zeros_like(student.weights[l]), np.zeros_like(student.weights[l])]
        opt[f"b{l}"] = [np.zeros_like(student.biases[l]), np.zeros_like(student.biases[l])]
    opt["head_w"] = [np.zeros_like(bank.head_w), np.zeros_like(bank.head_w)]
    opt["head_b"] = [np.zeros_like(bank.head_b), np.zeros_like(bank.head_b)]
    opt["centers"] = [np.zeros_like(bank.centers), np.zeros_like(bank.centers)]
    return TrainState(student=student, teacher=student.copy(), bank=bank,
                      opt=opt, step=0, rng=rng)


def train_step(state: TrainState, batch, config: TrainConfig) -> TrainState:
    """One optimization step; mutates and returns the state."""
    x, labels = batch
    views = _augment_batch(np.asarray(x, dtype=np.float64), config.views, state.rng,
                           config.sigma_aug, config.p_mask)
    breakdown, grads = loss_and_grads(views, labels, state.student, state.teacher,
                                      state.bank, config)
    if not np.isfinite(breakdown.total):
        raise DivergenceError(f"non-finite loss at step {state.step}")
    _apply_updates(state, grads, config)
    state.last_loss = breakdown
    state.last_grad_norm = grads.norm()
    return state


def weight_entropy(bank: CenterBank) -> float:
    """Mean Shannon entropy of the stored per-class weight rows."""
    w = np.maximum(bank.weights, _TINY)
    return float(-(w * np.log(w)).sum(axis=1).mean())


def train(features: np.ndarray, labels: np.ndarray, config: TrainConfig,
          n_groups: int, attribute_dim: int,
          log_path: str | None = None) -> TrainState:
    """Run the full toy training loop, emitting one JSONL record per step."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if (labels < 0).any():
        raise ValueError("training data must be fully labeled")
    n_classes = int(labels.max()) + 1
    rng = np.random.default_rng(config.seed)
    state = init_state(config, (features.shape[1], attribute_dim, n_groups, n_classes), rng)

    log_fh = open(log_path, "w") if log_path else None
    try:
        n = len(features)
        for _ in range(config.epochs):
            order = state.rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                train_step(state, (features[idx], labels[idx]), config)
                if log_fh:
                    record = {
                        "step": state.step,
                        "loss_total": state.last_loss.total,
                        "loss_kd": state.last_loss.kd,
                        "loss_align": state.last_loss.align,
                        "loss_weighted": state.last_loss.weighted,
                        "grad_norm": state.last_grad_norm,
                        "weight_entropy": weight_entropy(state.bank),
                    }
                    log_fh.write(json.dumps(record) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return state


def _apply_updates(state: TrainState, grads: Gradients, config: TrainConfig) -> None:
    t = state.step + 1
    for l, (dw, db) in enumerate(grads.encoder):
        _adam_update(state.student.weights[l], dw, state.opt[f"w{l}"], config.gamma1, t, config)
        _adam_update(state.student.biases[l], db, state.opt[f"b{l}"], config.gamma1, t, config)
    _adam_update(state.bank.head_w, grads.head_w, state.opt["head_w"], config.gamma1, t, config)
    _adam_update(state.bank.head_b, grads.head_b, state.opt["head_b"], config.gamma1, t, config)
    _adam_update(state.bank.centers, grads.centers, state.opt["centers"], config.gamma2, t, config)
    for cid, mean_w in grads.class_weight_means.items():
        state.bank.weights[cid] = (1.0 - config.gamma3) * state.bank.weights[cid] \
            + config.gamma3 * mean_w
    m = config.teacher_momentum
    for l in range(state.student.n_layers):
        state.teacher.weights[l] = m * state.teacher.weights[l] + (1.0 - m) * state.student.weights[l]
        state.teacher.biases[l] = m * state.teacher.biases[l] + (1.0 - m) * state.student.biases[l]
    state.step = t


def get_trainable_params(state: TrainState) -> np.ndarray:
    """Flatten all trainable tensors (layer order, then head, then centers)."""
    parts = []
    for w, b in zip(state.student.weights, state.student.biases):
        parts += [w.ravel(), b.ravel()]
    parts += [state.bank.head_w.ravel(), state.bank.head_b.ravel(), state.bank.centers.ravel()]
    return np.concatenate(parts)


def set_trainable_params(state: TrainState, flat: np.ndarray) -> None:
    pos = 0

    def take(template):
        nonlocal pos
        out = flat[pos : pos + template.size].reshape(template.shape).copy()
        pos += template.size
        return out

    for l in range(state.student.n_layers):
        state.student.weights[l] = take(state.student.weights[l])
        state.student.biases[l] = take(state.student.biases[l])
    state.bank.head_w = take(state.bank.head_w)
    state.bank.head_b = take(state.bank.head_b)
    state.bank.centers = take(state.bank.centers)
    assert pos == flat.size


def flatten_gradients(grads: Gradients) -> np.ndarray:
    """Same ordering as get_trainable_params."""
    parts = []
    for dw, db in grads.encoder:
        parts += [dw.ravel(), db.ravel()]
    parts += [grads.head_w.ravel(), grads.head_b.ravel(), grads.centers.ravel()]
    return np.concatenate(parts)


def export_to_density(state: TrainState, features: np.ndarray, labels: np.ndarray,
                      stats_mode: str = "raw",
                      ridge_policy: RidgePolicy | None = None) -> HvcmModel:
    """Encode the dataset with the student and freeze a detector model.

    The HVCM file format stores an affine projection head, so only encoders
    without hidden layers produce a model that round-trips through disk;
    deeper encoders yield an in-memory model with head=None.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if (labels < 0).any():
        raise ValueError("export needs a fully labeled dataset")
    attributes = state.student.forward(features)
    n_classes, n_groups, _ = state.bank.centers.shape
    present = set(int(c) for c in np.unique(labels))
    if present != set(range(n_classes)):
        raise ValueError(f"dataset covers classes {sorted(present)}, model has {n_classes}")

    class_attrs = {c: attributes[labels == c] for c in range(n_classes)}
    weights = {c: state.bank.weights[c] / state.bank.weights[c].sum() for c in range(n_classes)}
    head = None
    if state.student.n_layers == 1:
        head = ProjectionHead(weight=state.student.weights[0], bias=state.student.biases[0])
    config = HvcmConfig(
        n_groups=n_groups,
        attribute_dim=state.student.output_dim,
        feature_dim=state.student.input_dim,
        stats_mode=stats_mode,
        ridge_policy=ridge_policy or RidgePolicy(),
        head=head,
    )
    return freeze(class_attrs, weights, config)
