"""OOD evaluation: AUROC, FPR@TPR, threshold sweeps, calibration, ranking.

AUROC is the exact rank statistic (ties half-credited), not a trapezoidal
curve integral. FPR@TPR restricts candidate thresholds to observed InD
scores, matching the "score >= gamma" detector convention. Higher scores
mean more in-distribution; InD is the positive class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from hvcm.class_density import HvcmModel, classify_cosine_batch


@dataclass
class ScoreSet:
    scores: np.ndarray   # (n,) float
    is_ind: np.ndarray   # (n,) bool

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.is_ind = np.asarray(self.is_ind, dtype=bool)
        if self.scores.shape != self.is_ind.shape or self.scores.ndim != 1:
            raise ValueError("scores and is_ind must be matching 1-D arrays")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")

    @classmethod
    def from_parts(cls, ind_scores, ood_scores) -> "ScoreSet":
        ind = np.asarray(ind_scores, dtype=np.float64)
        ood = np.asarray(ood_scores, dtype=np.float64)
        return cls(
            scores=np.concatenate([ind, ood]),
            is_ind=np.concatenate([np.ones(len(ind), bool), np.zeros(len(ood), bool)]),
        )

    @property
    def n_ind(self) -> int:
        return int(self.is_ind.sum())

    @property
    def n_ood(self) -> int:
        return int((~self.is_ind).sum())

    def ind_scores(self) -> np.ndarray:
        return self.scores[self.is_ind]

    def ood_scores(self) -> np.ndarray:
        return self.scores[~self.is_ind]


@dataclass
class SweepCurve:
    thresholds: np.ndarray  # strictly decreasing
    tpr: np.ndarray         # nondecreasing along the list
    fpr: np.ndarray
    accuracy: np.ndarray    # balanced accuracy

    def rows(self) -> list[dict]:
        return [
            {"threshold": float(t), "tpr": float(a), "fpr": float(b), "accuracy": float(c)}
            for t, a, b, c in zip(self.thresholds, self.tpr, self.fpr, self.accuracy)
        ]


def _check_populations(s: ScoreSet) -> None:
    if s.n_ind < 1 or s.n_ood < 1:
        raise ValueError("both the InD and OOD populations must be nonempty")


def auroc(s: ScoreSet) -> float:
    """(#{InD > OOD} + 0.5 #ties) / (n_ind * n_ood) via average ranks."""
    _check_populations(s)
    ranks = rankdata(s.scores)  # average rank on ties
    n_ind, n_ood = s.n_ind, s.n_ood
    rank_sum = ranks[s.is_ind].sum()
    return float((rank_sum - n_ind * (n_ind + 1) / 2.0) / (n_ind * n_ood))


def fpr_at_tpr(s: ScoreSet, tpr_target: float = 0.95) -> float:
    """OOD fraction accepted at the largest InD-score threshold reaching the TPR."""
    _check_populations(s)
    if not 0.0 < tpr_target <= 1.0:
        raise ValueError(f"tpr_target must lie in (0,1], got {tpr_target}")
    ind = np.sort(s.ind_scores())
    ood = s.ood_scores()
    n = len(ind)
    # tpr at threshold g is (n - first index with score >= g) / n; scan
    # candidate thresholds from the largest observed InD score down.
    for gamma in np.unique(ind)[::-1]:
        tpr = (n - np.searchsorted(ind, gamma, side="left")) / n
        if tpr >= tpr_target:
            return float((ood >= gamma).mean())
    return float((ood >= ind.min()).mean())  # unreachable: min gives tpr 1


def sweep(s: ScoreSet, steps: int) -> SweepCurve:
    """tpr/fpr/balanced accuracy at thresholds spanning [min, max] scores."""
    _check_populations(s)
    if steps < 2:
        raise ValueError("steps must be >= 2")
    lo, hi = float(s.scores.min()), float(s.scores.max())
    thresholds = np.array([lo]) if lo == hi else np.linspace(hi, lo, steps)
    ind, ood = s.ind_scores(), s.ood_scores()
    tpr = np.array([(ind >= g).mean() for g in thresholds])
    fpr = np.array([(ood >= g).mean() for g in thresholds])
    return SweepCurve(thresholds=thresholds, tpr=tpr, fpr=fpr, accuracy=(tpr + 1.0 - fpr) / 2.0)


def calibrate_threshold(ind_scores, tpr_target: float = 0.95) -> float:
    """Empirical (1 - tpr_target) quantile of held-out InD scores."""
    scores = np.sort(np.asarray(ind_scores, dtype=np.float64))
    if len(scores) < 20:
        raise ValueError(f"need at least 20 InD scores to calibrate, got {len(scores)}")
    if not 0.0 < tpr_target <= 1.0:
        raise ValueError(f"tpr_target must lie in (0,1], got {tpr_target}")
    # the epsilon absorbs float error in n*(1-t), e.g. 100*(1-0.95) > 5
    idx = max(0, math.ceil(len(scores) * (1.0 - tpr_target) - 1e-9) - 1)
    return float(scores[idx])


def ind_accuracy(model: HvcmModel, attributes: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of samples the cosine classifier labels correctly."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty input")
    preds = classify_cosine_batch(model, attributes)
    return float((preds == labels).mean())


def rank_ood_classes(
    ind_centers: np.ndarray,
    candidate_class_centers: dict[int, np.ndarray],
    bins: int,
) -> list[list[int]]:
    """Order candidate classes near-to-far by mean cosine distance to InD centers.

    Returns ``bins`` contiguous equal-size bins (remainder in the last bin).
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    ind_centers = np.asarray(ind_centers, dtype=np.float64)
    ind_norms = np.linalg.norm(ind_centers, axis=1)
    if (ind_norms == 0).any():
        raise ValueError("zero-norm InD center")
    unit_ind = ind_centers / ind_norms[:, None]

    distances = {}
    for cid, center in candidate_class_centers.items():
        center = np.asarray(center, dtype=np.float64)
        norm = np.linalg.norm(center)
        if norm == 0:
            raise ValueError(f"zero-norm center for candidate class {cid}")
        distances[cid] = float(np.mean(1.0 - unit_ind @ (center / norm)))

    ordered = sorted(distances, key=lambda cid: (distances[cid], cid))
    size = len(ordered) // bins
    if size == 0:
        raise ValueError(f"cannot split {len(ordered)} classes into {bins} bins")
    out = [ordered[i * size : (i + 1) * size] for i in range(bins - 1)]
    out.append(ordered[(bins - 1) * size :])
    return out


def metrics_report(s: ScoreSet, tpr_target: float = 0.95, sweep_steps: int = 0) -> dict:
    """JSON-ready report: {auroc, fpr95, n_ind, n_ood, threshold, sweep}."""
    report = {
        "auroc": auroc(s),
        "fpr95": fpr_at_tpr(s, tpr_target),
        "n_ind": s.n_ind,
        "n_ood": s.n_ood,
        "threshold": calibrate_threshold(s.ind_scores(), tpr_target)
        if s.n_ind >= 20
        else None,
        "sweep": sweep(s, sweep_steps).rows() if sweep_steps >= 2 else [],
    }
    return report
