"""Command-line entry point: fit / score / eval / train-toy / rank-ood / classify.

Exit codes: 0 success, 2 input or flag error, 3 degenerate fit, 4 training
divergence. All file outputs are written atomically (write-then-rename) and
reruns with identical inputs produce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from hvcm.attribute_space import ProjectionHead
from hvcm.class_density import (
    DegenerateFitError,
    HvcmConfig,
    RidgePolicy,
    classify_cosine_batch,
    features_to_attributes,
    freeze,
    score_features,
)
from hvcm.eval_harness import ScoreSet, metrics_report
from hvcm.feature_store import FormatError, ValidationError, load_features
from hvcm.model_io import load_model, save_model
from hvcm.trainer import DivergenceError, TrainConfig, export_to_density, train

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DEGENERATE = 3
EXIT_DIVERGED = 4


def _write_atomic(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _load_labeled(path: str):
    ds = load_features(path)
    if ds.labels is None:
        raise ValidationError(f"{path} has no labels")
    if (ds.labels < 0).any():
        raise ValidationError(f"{path} contains unlabeled (-1) rows; expected all labeled")
    return ds


def _read_score_column(path: str) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if "score" not in header:
        raise ValidationError(f"{path} has no 'score' column")
    col = header.index("score")
    try:
        return np.array([float(r[col]) for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def cmd_fit(args) -> int:
    ds = _load_labeled(args.features)
    d = ds.dim
    config = HvcmConfig(
        n_groups=args.groups,
        attribute_dim=d,
        feature_dim=d,
        stats_mode=args.stats_mode,
        ridge_policy=RidgePolicy(floor=args.ridge),
        head=ProjectionHead.identity(d),
    )
    attributes = ds.data.astype(np.float64)
    class_ids = sorted(int(c) for c in np.unique(ds.labels))
    class_attrs = {c: attributes[ds.labels == c] for c in class_ids}
    weights = None
    if args.weights != "uniform":
        with open(args.weights) as fh:
            raw = json.load(fh)
        weights = {int(k): np.asarray(v, dtype=np.float64) for k, v in raw.items()}
    model = freeze(class_attrs, weights, config)
    for cm in model.classes:
        n_c = class_attrs[cm.class_id].shape[0]
        ridge = max(comp.ridge for comp in cm.components)
        print(f"class {cm.class_id}: n={n_c} ridge={ridge:.6g}")
    save_model(model, args.out)
    return EXIT_OK


def cmd_score(args) -> int:
    model = load_model(args.model)
    ds = load_features(args.features)
    scores, ids, per_class = score_features(model, ds.data.astype(np.float64))
    lines = ["index,score,argmax_class"]
    if args.per_class:
        lines[0] += "," + ",".join(f"score_{cm.class_id}" for cm in model.classes)
    for i in range(len(scores)):
        row = f"{i},{float(scores[i])!r},{int(ids[i])}"
        if args.per_class:
            row += "," + ",".join(repr(float(v)) for v in per_class[i])
        lines.append(row)
    _write_atomic(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    ind = _read_score_column(args.ind)
    ood = _read_score_column(args.ood)
    if len(ind) == 0 or len(ood) == 0:
        raise ValidationError("both score files must be nonempty")
    report = metrics_report(ScoreSet.from_parts(ind, ood), tpr_target=args.tpr,
                            sweep_steps=args.sweep)
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    sys.stdout.write(text)
    if args.out:
        _write_atomic(args.out, text)
    return EXIT_OK


def cmd_train_toy(args) -> int:
    ds = _load_labeled(args.features)
    if args.config:
        with open(args.config) as fh:
            config = TrainConfig.from_json(json.load(fh))
    else:
        config = TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    state = train(ds.data.astype(np.float64), ds.labels, config,
                  n_groups=args.groups, attribute_dim=args.attribute_dim,
                  log_path=args.log)
    model = export_to_density(state, ds.data.astype(np.float64), ds.labels,
                              stats_mode=args.stats_mode)
    save_model(model, args.out)
    print(f"trained {state.step} steps, final loss {state.last_loss.total:.6g}")
    return EXIT_OK


def cmd_rank_ood(args) -> int:
    from hvcm.eval_harness import rank_ood_classes

    model = load_model(args.ind_model)
    cand = _load_labeled(args.candidates)
    attributes = features_to_attributes(model, cand.data.astype(np.float64))
    centers = {
        int(c): attributes[cand.labels == c].mean(axis=0) for c in np.unique(cand.labels)
    }
    bins = rank_ood_classes(model.center_matrix(), centers, args.bins)
    _write_atomic(args.out, json.dumps({"bins": bins}, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_classify(args) -> int:
    model = load_model(args.model)
    ds = load_features(args.features)
    attributes = features_to_attributes(model, ds.data.astype(np.float64))
    preds = classify_cosine_batch(model, attributes)
    lines = ["index,predicted_class"] + [f"{i},{p}" for i, p in enumerate(preds)]
    _write_atomic(args.out, "\n".join(lines) + "\n")
    if ds.labels is not None and (ds.labels >= 0).any():
        mask = ds.labels >= 0
        acc = float((preds[mask] == ds.labels[mask]).mean())
        print(f"accuracy {acc:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvcm", description=__doc__)
    parser.add_argument("--deterministic", action="store_true",
                        help="force fixed-order reductions (all paths here already are)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit grouped Gaussians from labeled attributes")
    p.add_argument("--features", required=True)
    p.add_argument("--groups", type=int, required=True)
    p.add_argument("--ridge", type=float, default=1e-6, help="ridge floor")
    p.add_argument("--stats-mode", choices=("raw", "softmax"), default="raw")
    p.add_argument("--weights", default="uniform",
                   help="'uniform' or a JSON file mapping class id to G weights")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", help="score features against a model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="AUROC/FPR95 report from InD and OOD score files")
    p.add_argument("--ind", required=True)
    p.add_argument("--ood", required=True)
    p.add_argument("--tpr", type=float, default=0.95)
    p.add_argument("--sweep", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-toy", help="joint toy training, then export a model")
    p.add_argument("--features", required=True)
    p.add_argument("--config", help="JSON file mirroring the training config")
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--attribute-dim", type=int, default=16)
    p.add_argument("--stats-mode", choices=("raw", "softmax"), default="raw")
    p.add_argument("--log", help="JSONL step log path")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("rank-ood", help="near-to-far bins of candidate OOD classes")
    p.add_argument("--ind-model", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--bins", type=int, default=9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank_ood)

    p = sub.add_parser("classify", help="cosine classification against class centers")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)

    return parser


def _limit_threads() -> None:
    cap = os.environ.get("HVCM_THREADS")
    if not cap:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(int(cap))
    except (ImportError, ValueError):
        pass


def main(argv=None) -> int:
    _limit_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: bad flags exit 2, --help exits 0
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except DegenerateFitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, ValidationError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
