import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_blobs
from hvcm.class_density import HvcmConfig, freeze, prepare_groups
from hvcm.eval_harness import (
    ScoreSet,
    auroc,
    calibrate_threshold,
    fpr_at_tpr,
    ind_accuracy,
    metrics_report,
    rank_ood_classes,
    sweep,
)


def pairwise_auroc(ind, ood):
    """O(n^2) oracle: wins + half ties over all InD/OOD pairs."""
    wins = sum(1.0 if i > o else 0.5 if i == o else 0.0 for i in ind for o in ood)
    return wins / (len(ind) * len(ood))


class TestAuroc:
    def test_perfect_separation(self):
        s = ScoreSet.from_parts([3.0, 2.0, 1.0], [0.0, -1.0])
        assert auroc(s) == 1.0
        assert fpr_at_tpr(s, 0.95) == 0.0

    def test_inverted_separation(self):
        s = ScoreSet.from_parts([0.0, -1.0], [3.0, 2.0])
        assert auroc(s) == 0.0

    def test_all_tied_is_chance(self):
        s = ScoreSet.from_parts(np.zeros(5), np.zeros(7))
        assert auroc(s) == 0.5

    def test_matches_pairwise_oracle(self, rng):
        for _ in range(20):
            ind = rng.integers(0, 6, 15).astype(float)  # integers force ties
            ood = rng.integers(0, 6, 11).astype(float)
            s = ScoreSet.from_parts(ind, ood)
            assert auroc(s) == pytest.approx(pairwise_auroc(ind, ood), abs=1e-12)

    def test_empty_population_rejected(self):
        with pytest.raises(ValueError):
            auroc(ScoreSet.from_parts([1.0], []))

    @settings(max_examples=40, deadline=None)
    @given(
        ind=st.lists(st.integers(-100, 100), min_size=1, max_size=20),
        ood=st.lists(st.integers(-100, 100), min_size=1, max_size=20),
        scale=st.integers(1, 10),
        shift=st.integers(-50, 50),
    )
    def test_monotone_transform_invariance(self, ind, ood, scale, shift):
        # integer inputs keep ties exact under the affine map
        base = auroc(ScoreSet.from_parts(ind, ood))
        moved = auroc(ScoreSet.from_parts(
            scale * np.asarray(ind, float) + shift,
            scale * np.asarray(ood, float) + shift))
        assert moved == base

    @settings(max_examples=40, deadline=None)
    @given(
        ind=st.lists(st.floats(-100, 100), min_size=1, max_size=20),
        ood=st.lists(st.floats(-100, 100), min_size=1, max_size=20),
    )
    def test_swap_and_negate_symmetry(self, ind, ood):
        forward = auroc(ScoreSet.from_parts(ind, ood))
        mirrored = auroc(ScoreSet.from_parts(-np.asarray(ood), -np.asarray(ind)))
        assert mirrored == pytest.approx(forward, abs=1e-12)


class TestFprAtTpr:
    def test_hand_case(self):
        # threshold must come from InD scores; gamma=1 reaches tpr 1.0 and
        # accepts exactly one of the two OOD scores
        s = ScoreSet.from_parts([3.0, 2.0, 1.0], [2.5, 0.0])
        assert fpr_at_tpr(s, 1.0) == 0.5
        assert fpr_at_tpr(s, 0.6) == 0.5  # gamma=2, accepts 2.5 only

    def test_exhaustive_threshold_oracle(self, rng):
        for _ in range(20):
            ind = rng.normal(0, 1, 25)
            ood = rng.normal(-1, 1, 25)
            s = ScoreSet.from_parts(ind, ood)
            for target in (0.5, 0.8, 0.95, 1.0):
                feasible = [g for g in ind if (ind >= g).mean() >= target]
                expected = (ood >= max(feasible)).mean()
                assert fpr_at_tpr(s, target) == pytest.approx(expected, abs=1e-12)

    def test_bad_target(self):
        s = ScoreSet.from_parts([1.0], [0.0])
        with pytest.raises(ValueError):
            fpr_at_tpr(s, 0.0)

    @settings(max_examples=40, deadline=None)
    @given(
        ind=st.lists(st.floats(-50, 50), min_size=2, max_size=15),
        ood=st.lists(st.floats(-50, 50), min_size=2, max_size=15),
        shift=st.floats(0, 100),
    )
    def test_fpr_nonincreasing_under_ind_shift(self, ind, ood, shift):
        base = fpr_at_tpr(ScoreSet.from_parts(ind, ood), 0.95)
        lifted = fpr_at_tpr(ScoreSet.from_parts(np.asarray(ind) + shift, ood), 0.95)
        assert lifted <= base + 1e-12


class TestSweep:
    def test_endpoints_and_monotonicity(self, rng):
        s = ScoreSet.from_parts(rng.normal(1, 1, 40), rng.normal(-1, 1, 40))
        curve = sweep(s, 11)
        assert curve.thresholds[0] == s.scores.max()
        assert curve.thresholds[-1] == s.scores.min()
        assert (np.diff(curve.thresholds) < 0).all()
        assert (np.diff(curve.tpr) >= 0).all() and (np.diff(curve.fpr) >= 0).all()
        assert curve.tpr[-1] == 1.0 and curve.fpr[-1] == 1.0

    def test_balanced_accuracy(self):
        s = ScoreSet.from_parts([2.0, 2.0], [0.0, 0.0])
        curve = sweep(s, 3)
        mid = curve.rows()[1]
        assert mid["tpr"] == 1.0 and mid["fpr"] == 0.0 and mid["accuracy"] == 1.0

    def test_degenerate_scores_single_point(self):
        s = ScoreSet.from_parts([1.0, 1.0], [1.0])
        curve = sweep(s, 10)
        assert len(curve.thresholds) == 1
        assert curve.accuracy[0] == 0.5

    def test_too_few_steps(self):
        with pytest.raises(ValueError):
            sweep(ScoreSet.from_parts([1.0], [0.0]), 1)


class TestCalibration:
    def test_fifth_lowest_of_hundred(self):
        scores = np.arange(100, dtype=float)  # 0..99
        # ceil(100 * 0.05) - 1 = 4, the fifth lowest value
        assert calibrate_threshold(scores, 0.95) == 4.0

    def test_full_tpr_gives_min(self, rng):
        scores = rng.normal(0, 1, 50)
        assert calibrate_threshold(scores, 1.0) == scores.min()

    def test_recount_on_fresh_scores(self, rng):
        scores = rng.normal(0, 1, 1000)
        gamma = calibrate_threshold(scores, 0.95)
        achieved = (scores >= gamma).mean()
        assert 0.94 <= achieved <= 0.96

    def test_too_few_scores(self):
        with pytest.raises(ValueError, match="at least 20"):
            calibrate_threshold(np.zeros(19))


class TestIndAccuracy:
    def make_model(self, rng, centers, std=1.0, n_per=100):
        x, y = make_blobs(rng, centers, std=std, n_per=n_per)
        config = HvcmConfig(n_groups=1, attribute_dim=x.shape[1],
                            feature_dim=x.shape[1])
        model = freeze({c: x[y == c] for c in np.unique(y)}, None, config)
        return model, x, y

    def test_perfect_at_centers(self, rng):
        model, _, _ = self.make_model(rng, [[10, 0], [0, 10]])
        centers = np.array([[10.0, 0.0], [0.0, 10.0]])
        assert ind_accuracy(model, centers, np.array([0, 1])) == 1.0

    def test_chance_on_permuted_labels(self, rng):
        model, x, y = self.make_model(rng, [[10, 0], [0, 10]])
        swapped = 1 - y
        acc = ind_accuracy(model, x, y) + ind_accuracy(model, x, swapped)
        assert acc == pytest.approx(1.0, abs=1e-12)

    def test_held_out_blobs(self, rng):
        model, _, _ = self.make_model(rng, [[10, 10], [30, 10], [10, 30]])
        x, y = make_blobs(rng, [[10, 10], [30, 10], [10, 30]], n_per=200)
        assert ind_accuracy(model, x, y) >= 0.99

    def test_empty_rejected(self, rng):
        model, _, _ = self.make_model(rng, [[10, 0], [0, 10]])
        with pytest.raises(ValueError):
            ind_accuracy(model, np.zeros((0, 2)), np.zeros(0, dtype=int))


class TestRankOod:
    def test_planted_angles(self):
        ind = np.array([[1.0, 0.0]])
        angles = {k: np.array([np.cos(t), np.sin(t)])
                  for k, t in enumerate(np.linspace(0.1, 1.5, 6))}
        bins = rank_ood_classes(ind, angles, 3)
        assert bins == [[0, 1], [2, 3], [4, 5]]

    def test_orthogonal_distance_is_one(self):
        ind = np.array([[1.0, 0.0]])
        bins = rank_ood_classes(ind, {0: np.array([0.0, 5.0]),
                                      1: np.array([2.0, 0.0])}, 2)
        assert bins == [[1], [0]]

    def test_rescaling_invariance(self, rng):
        ind = rng.normal(0, 1, (3, 4))
        cands = {k: rng.normal(0, 1, 4) for k in range(7)}
        base = rank_ood_classes(ind, cands, 3)
        scaled = rank_ood_classes(ind * 2.0, {k: v * rng.uniform(0.1, 9)
                                              for k, v in cands.items()}, 3)
        assert base == scaled

    def test_remainder_goes_to_last_bin(self):
        ind = np.array([[1.0, 0.0]])
        cands = {k: np.array([np.cos(k * 0.2 + 0.1), np.sin(k * 0.2 + 0.1)])
                 for k in range(7)}
        bins = rank_ood_classes(ind, cands, 3)
        assert [len(b) for b in bins] == [2, 2, 3]

    def test_more_bins_than_classes(self):
        ind = np.array([[1.0, 0.0]])
        with pytest.raises(ValueError):
            rank_ood_classes(ind, {0: np.array([0.0, 1.0])}, 2)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            rank_ood_classes(np.array([[1.0, 0.0]]), {0: np.zeros(2)}, 1)


class TestReport:
    def test_schema_and_values(self, rng):
        s = ScoreSet.from_parts(rng.normal(2, 1, 50), rng.normal(-2, 1, 50))
        report = metrics_report(s, tpr_target=0.95, sweep_steps=5)
        assert set(report) == {"auroc", "fpr95", "n_ind", "n_ood", "threshold", "sweep"}
        assert report["auroc"] == auroc(s)
        assert report["n_ind"] == 50 and report["n_ood"] == 50
        assert report["threshold"] == calibrate_threshold(s.ind_scores(), 0.95)
        assert len(report["sweep"]) == 5

    def test_small_ind_population_skips_threshold(self):
        s = ScoreSet.from_parts([1.0, 2.0], [0.0])
        report = metrics_report(s)
        assert report["threshold"] is None and report["sweep"] == []
