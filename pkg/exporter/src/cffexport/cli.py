"""Command-line entry point: export image features for the pipeline."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backbone import BackboneError
from .export import ExportError, export_features


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cffexport",
        description="Export penultimate-layer backbone features as CFF1 files")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="run a directory of images through a backbone")
    p.add_argument("--model", required=True,
                   help="torchvision model id, e.g. resnet18")
    p.add_argument("--images", required=True, help="directory of images")
    p.add_argument("--out", required=True, help="output .cff path")
    p.add_argument("--labels", help="JSON map of file name -> label")
    p.add_argument("--weights", help="local state-dict path; without it the "
                   "backbone uses a fixed-seed random initialization")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0,
                   help="initialization seed when no weights are given")
    p.set_defaults(func=cmd_export)
    return parser


def cmd_export(args) -> None:
    labels_map = json.loads(Path(args.labels).read_text()) if args.labels else None
    manifest = export_features(
        args.model, args.images, args.out, labels_map=labels_map,
        weights=args.weights, batch_size=args.batch_size, seed=args.seed)
    line = f"exported {manifest.n} rows x {manifest.d} dims -> {args.out}"
    if manifest.skipped:
        line += f" (skipped {len(manifest.skipped)})"
    print(line)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ExportError, BackboneError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
