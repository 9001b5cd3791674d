"""End-to-end acceptance checks; run with ``pytest -s tests/test_acceptance.py``.

Each test prints one ``ACCEPTANCE <name>: PASS`` line once its assertions
hold, so the suite doubles as a human-readable checklist.
"""

import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from conftest import make_blobs
from hvcm.class_density import (
    HvcmConfig,
    RidgePolicy,
    dataset_score_batch,
    fit_class,
    mahalanobis,
    prepare_groups,
    score_features,
)
from hvcm.cli import main
from hvcm.eval_harness import ScoreSet, auroc, fpr_at_tpr, ind_accuracy, sweep
from hvcm.feature_store import FeatureDataset, load_features, save_features
from hvcm.trainer import (
    TrainConfig,
    export_to_density,
    flatten_gradients,
    get_trainable_params,
    init_state,
    loss_and_grads,
    set_trainable_params,
    train,
)


def report(name):
    print(f"\nACCEPTANCE {name}: PASS")


def two_pass_covariance(x):
    mu = x.mean(axis=0)
    k = x.shape[1]
    acc = np.zeros((k, k))
    for row in x:
        acc += np.outer(row - mu, row - mu)
    return mu, acc / (len(x) - 1)


def test_covariance_oracle():
    start = time.monotonic()
    rng = np.random.default_rng(100)
    policy = RidgePolicy()
    for _ in range(100):
        n = int(rng.integers(3, 60))
        dim = int(rng.integers(1, 4)) * int(rng.integers(1, 5))
        n_groups = 1
        for g in (1, 2, 4):
            if dim % g == 0:
                n_groups = g
        x = rng.normal(0, rng.uniform(0.5, 5), (n, dim))
        stack = x.reshape(n, n_groups, dim // n_groups)
        cm = fit_class(stack, np.full(n_groups, 1.0 / n_groups), policy)
        for i, comp in enumerate(cm.components):
            mu, cov = two_pass_covariance(stack[:, i, :])
            assert np.abs(comp.mu - mu).max() <= 1e-10
            recon = comp.chol @ comp.chol.T - comp.ridge * np.eye(cov.shape[0])
            assert np.abs(recon - cov).max() <= 1e-10
    assert time.monotonic() - start < 10.0
    report("covariance-oracle")


def test_mahalanobis_oracle():
    start = time.monotonic()
    rng = np.random.default_rng(101)
    policy = RidgePolicy()
    for _ in range(100):
        k = int(rng.integers(1, 17))
        x = rng.normal(0, 1, (k + 5, 1, k)) * rng.uniform(0.5, 3)
        cm = fit_class(x, np.ones(1), policy)
        comp = cm.components[0]
        # exact zero at the mean
        assert mahalanobis(comp, comp.mu) == 0.0
        cov = np.cov(x[:, 0, :], rowvar=False).reshape(k, k)
        inv = np.linalg.inv(cov + comp.ridge * np.eye(k))
        for _ in range(5):
            a = comp.mu + rng.normal(0, 2, k)
            diff = a - comp.mu
            oracle = -float(diff @ inv @ diff)
            got = mahalanobis(comp, a)
            assert abs(got - oracle) <= 1e-9 * max(1.0, abs(oracle))
    # nonpositive on a large batch
    x = rng.normal(0, 1, (50, 1, 8))
    cm = fit_class(x, np.ones(1), policy)
    from hvcm.class_density import mahalanobis_batch

    big = rng.normal(0, 5, (100000, 8))
    assert (mahalanobis_batch(cm.components[0], big) <= 0.0).all()
    assert time.monotonic() - start < 10.0
    report("mahalanobis-oracle")


def pairwise_auroc(ind, ood):
    wins = sum(1.0 if i > o else 0.5 if i == o else 0.0 for i in ind for o in ood)
    return wins / (len(ind) * len(ood))


def test_metrics_oracle():
    start = time.monotonic()
    rng = np.random.default_rng(102)
    for trial in range(50):
        n_i = int(rng.integers(2, 40))
        n_o = int(rng.integers(2, 40))
        if trial % 2:  # integer scores force heavy ties
            ind = rng.integers(0, 5, n_i).astype(float)
            ood = rng.integers(0, 5, n_o).astype(float)
        else:
            ind = rng.normal(0.5, 1, n_i)
            ood = rng.normal(-0.5, 1, n_o)
        s = ScoreSet.from_parts(ind, ood)
        assert auroc(s) == pairwise_auroc(ind, ood)
        for target in (0.5, 0.9, 0.95, 1.0):
            feasible = [g for g in ind if (ind >= g).mean() >= target]
            assert fpr_at_tpr(s, target) == (ood >= max(feasible)).mean()
        curve = sweep(s, 7)
        for g, tp, fp in zip(curve.thresholds, curve.tpr, curve.fpr):
            assert tp == (ind >= g).mean() and fp == (ood >= g).mean()
    assert time.monotonic() - start < 30.0
    report("metrics-oracle")


def test_gradient_fidelity():
    start = time.monotonic()
    rng = np.random.default_rng(103)
    h = 1e-5
    for trial in range(20):
        config = TrainConfig(
            alpha=float(rng.uniform(0.2, 2)),
            beta=float(rng.uniform(0.05, 1)),
            objective=("KL", "L2", "JS")[trial % 3],
            tau_s=float(rng.uniform(0.05, 0.5)),
            tau_t=float(rng.uniform(0.02, 0.2)),
            views=2 + trial % 2,
            hidden=() if trial % 2 else (5,),
        )
        q_in, d, n_groups, n_classes = 3, 8, 2, 2
        state = init_state(config, (q_in, d, n_groups, n_classes),
                           np.random.default_rng(trial))
        n_batch = int(rng.integers(1, 4))
        views = rng.normal(0, 1, (n_batch, config.views, q_in))
        labels = rng.integers(0, n_classes, n_batch)

        _, grads = loss_and_grads(views, labels, state.student, state.teacher,
                                  state.bank, config)
        analytic = flatten_gradients(grads)
        p0 = get_trainable_params(state)
        fd = np.empty_like(p0)
        for i in range(p0.size):
            for sign, slot in ((h, 0), (-h, 1)):
                p = p0.copy()
                p[i] += sign
                set_trainable_params(state, p)
                val, _ = loss_and_grads(views, labels, state.student,
                                        state.teacher, state.bank, config)
                if slot == 0:
                    up = val.total
                else:
                    fd[i] = (up - val.total) / (2 * h)
        set_trainable_params(state, p0)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-6)
        assert (np.abs(analytic - fd) / denom).max() <= 1e-4
    assert time.monotonic() - start < 60.0
    report("gradient-fidelity")


def test_synthetic_end_to_end():
    start = time.monotonic()
    rng = np.random.default_rng(7)
    centers = [[10, 10], [30, 10], [10, 30]]
    x_train, y_train = make_blobs(rng, centers, std=1.0, n_per=200)
    x_test, y_test = make_blobs(rng, centers, std=1.0, n_per=100)
    x_ood = rng.normal(100.0, 1.0, (300, 2))

    state = train(x_train, y_train, TrainConfig(), n_groups=4, attribute_dim=16)
    model = export_to_density(state, x_train, y_train)

    ind_scores, _, _ = score_features(model, x_test)
    ood_scores, _, _ = score_features(model, x_ood)
    s = ScoreSet.from_parts(ind_scores, ood_scores)
    assert auroc(s) >= 0.99
    assert fpr_at_tpr(s, 0.95) <= 0.05
    attrs = state.student.forward(x_test)
    assert ind_accuracy(model, attrs, y_test) >= 0.99
    assert time.monotonic() - start < 120.0
    report("synthetic-end-to-end")


def test_mahalanobis_baseline_reduction():
    rng = np.random.default_rng(104)
    x, y = make_blobs(rng, [[0, 0, 0], [6, 6, 0], [0, 6, 6]], std=1.3, n_per=120)
    config = HvcmConfig(n_groups=1, attribute_dim=3, feature_dim=3)
    from hvcm.class_density import freeze

    model = freeze({c: x[y == c] for c in range(3)}, None, config)
    probe = rng.normal(3, 4, (400, 3))
    scores, _ = dataset_score_batch(model, prepare_groups(model.config, probe))

    # classic max-over-classes Mahalanobis with explicit inverses
    oracle = np.full(400, -np.inf)
    for cm in model.classes:
        comp = cm.components[0]
        cov = np.cov(x[y == cm.class_id], rowvar=False)
        inv = np.linalg.inv(cov + comp.ridge * np.eye(3))
        diff = probe - comp.mu
        oracle = np.maximum(oracle, -np.einsum("ij,jk,ik->i", diff, inv, diff))

    from scipy.stats import rankdata

    assert np.array_equal(rankdata(scores), rankdata(oracle))
    rho = spearmanr(scores, oracle).statistic
    assert rho == pytest.approx(1.0, abs=1e-12)
    assert np.abs(scores - oracle).max() <= 1e-8
    report("mahalanobis-baseline-reduction")


def _ablation_auroc(seed, n_groups):
    rng = np.random.default_rng(seed)
    dim, block = 16, 4
    mus = rng.normal(0, 2, (3, dim))
    train_x, test_x, ood_x = [], [], []
    for c in range(3):
        cov = np.zeros((dim, dim))
        for b in range(dim // block):
            a = rng.normal(0, 1, (block, block))
            sl = slice(b * block, (b + 1) * block)
            cov[sl, sl] = a @ a.T + 0.1 * np.eye(block)
        chol = np.linalg.cholesky(cov)
        train_x.append(mus[c] + rng.normal(0, 1, (300, dim)) @ chol.T)
        test_x.append(mus[c] + rng.normal(0, 1, (100, dim)) @ chol.T)
        # near-OOD: same means, isotropic with inflated scale
        iso = np.sqrt(np.trace(cov) / dim) * 1.5
        ood_x.append(mus[c] + rng.normal(0, iso, (100, dim)))
    labels = np.repeat(np.arange(3), 300)
    x = np.vstack(train_x)

    from hvcm.class_density import freeze

    config = HvcmConfig(n_groups=n_groups, attribute_dim=dim, feature_dim=dim)
    model = freeze({c: x[labels == c] for c in range(3)}, None, config)
    ind, _ = dataset_score_batch(model, prepare_groups(config, np.vstack(test_x)))
    ood, _ = dataset_score_batch(model, prepare_groups(config, np.vstack(ood_x)))
    return auroc(ScoreSet.from_parts(ind, ood))


def test_grouping_ablation_direction():
    for seed in range(10):
        grouped = _ablation_auroc(seed, 4)
        single = _ablation_auroc(seed, 1)
        assert grouped >= single - 0.01, f"seed {seed}: {grouped} < {single}"
    report("grouping-ablation-direction")


def test_cli_determinism(tmp_path, rng):
    centers = [[10, 10, 0, 0], [30, 10, 0, 0], [10, 30, 0, 0]]
    x, y = make_blobs(rng, centers, n_per=60)
    train_path = tmp_path / "train.hvcf"
    save_features(FeatureDataset(data=x.astype(np.float32),
                                 labels=y.astype(np.int32), c_max=3), train_path)
    x2, _ = make_blobs(rng, centers, n_per=30)
    probe_path = tmp_path / "probe.hvcf"
    save_features(FeatureDataset(data=x2.astype(np.float32)), probe_path)
    ood = rng.normal(90.0, 1.0, (50, 4)).astype(np.float32)
    ood_path = tmp_path / "ood.hvcf"
    save_features(FeatureDataset(data=ood), ood_path)

    outputs = {}
    for tag in ("a", "b"):
        base = tmp_path / tag
        base.mkdir()
        model, toy = base / "m.hvcm", base / "t.hvcm"
        i_csv, o_csv = base / "i.csv", base / "o.csv"
        rep, bins, preds = base / "r.json", base / "b.json", base / "p.csv"
        assert main(["fit", "--features", str(train_path), "--groups", "2",
                     "--out", str(model)]) == 0
        assert main(["score", "--model", str(model), "--features", str(probe_path),
                     "--out", str(i_csv)]) == 0
        assert main(["score", "--model", str(model), "--features", str(ood_path),
                     "--out", str(o_csv)]) == 0
        assert main(["eval", "--ind", str(i_csv), "--ood", str(o_csv),
                     "--sweep", "4", "--out", str(rep)]) == 0
        assert main(["rank-ood", "--ind-model", str(model),
                     "--candidates", str(train_path), "--bins", "3",
                     "--out", str(bins)]) == 0
        assert main(["classify", "--model", str(model),
                     "--features", str(probe_path), "--out", str(preds)]) == 0
        assert main(["train-toy", "--features", str(train_path), "--groups", "2",
                     "--attribute-dim", "8", "--seed", "11",
                     "--out", str(toy)]) == 0
        outputs[tag] = [model, i_csv, o_csv, rep, bins, preds, toy]
    for f_a, f_b in zip(outputs["a"], outputs["b"]):
        assert f_a.read_bytes() == f_b.read_bytes(), f_a.name
    report("cli-determinism")


def test_format_round_trip(tmp_path):
    rng = np.random.default_rng(105)
    for trial in range(100):
        n = int(rng.integers(0, 30))
        dim = int(rng.integers(1, 8))
        labeled = bool(trial % 2)
        labels = rng.integers(-1, 4, n).astype(np.int32) if labeled else None
        ds = FeatureDataset(
            data=(rng.normal(0, 100, (n, dim)) * 10.0 ** rng.integers(-3, 4))
            .astype(np.float32),
            labels=labels,
            c_max=4,
        )
        path = tmp_path / f"rt{trial}.hvcf"
        save_features(ds, path)
        back = load_features(path)
        assert back == ds  # bit-exact: compares the float payload as uint32

    good = tmp_path / "rt0.hvcf"
    bad = tmp_path / "corrupt.hvcf"
    raw = bytearray(good.read_bytes())
    raw[:4] = b"ZZZZ"
    bad.write_bytes(bytes(raw))
    assert main(["score", "--model", str(tmp_path / "missing.hvcm"),
                 "--features", str(bad), "--out", str(tmp_path / "s.csv")]) == 2
    assert main(["fit", "--features", str(bad), "--groups", "1",
                 "--out", str(tmp_path / "m.hvcm")]) == 2
    report("format-round-trip")
