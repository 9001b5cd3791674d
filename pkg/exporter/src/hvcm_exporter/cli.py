"""Command line front end: dump .npz arrays or image folders to HVCF."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from hvcm_exporter.export import ExportError, export_arrays, export_images
from hvcm_exporter.manifest import ExportManifest


def _load_label_map(path: str | None, names: list[str]) -> dict[str, int]:
    if path:
        with open(path) as fh:
            return {str(k): int(v) for k, v in json.load(fh).items()}
    return {name: i for i, name in enumerate(sorted(names))}


def cmd_arrays(args) -> int:
    with np.load(args.npz) as bundle:
        arrays = {name: bundle[name] for name in bundle.files}
    manifest = ExportManifest(
        source_kind="array-dump",
        output_path=args.out,
        label_map=_load_label_map(args.labels, list(arrays)),
    )
    export_arrays(manifest, arrays)
    print(f"wrote {args.out}")
    return 0


def cmd_images(args) -> int:
    import os

    names = [d for d in sorted(os.listdir(args.folder))
             if os.path.isdir(os.path.join(args.folder, d))]
    manifest = ExportManifest(
        source_kind="image-folder",
        output_path=args.out,
        label_map=_load_label_map(args.labels, names),
        backbone=args.backbone,
        layer=args.layer,
    )
    export_images(manifest, args.folder, batch_size=args.batch_size)
    print(f"wrote {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hvcm-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("arrays", help="export a .npz bundle (one matrix per class)")
    p.add_argument("--npz", required=True)
    p.add_argument("--labels", help="JSON class-name to label-id map; default sorted names")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_arrays)

    p = sub.add_parser("images", help="embed an image folder with a pretrained backbone")
    p.add_argument("--folder", required=True)
    p.add_argument("--labels", help="JSON class-name to label-id map; default sorted names")
    p.add_argument("--backbone", default="resnet50")
    p.add_argument("--layer", default="avgpool")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_images)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ExportError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
