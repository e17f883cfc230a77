"""Exporter command line: fixture training and checkpoint conversion."""

from __future__ import annotations

import argparse
import sys

import torch

from .convert import ExportError, export_weights
from .fixture import train_fixture


def main(argv=None) -> None:
    p = argparse.ArgumentParser(prog="pane-export")
    sub = p.add_subparsers(dest="cmd", required=True)

    f = sub.add_parser("fixture", help="train and emit the fixture bundle")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", default="fixtures")

    m = sub.add_parser("model", help="convert a saved nn.Sequential checkpoint")
    m.add_argument("--checkpoint", required=True, help="torch.save()d nn.Sequential")
    m.add_argument("--input-shape", required=True, help="C,H,W")
    m.add_argument("--out", required=True, help="output .panew path")
    m.add_argument("--manifest", default=None)
    m.add_argument("--name", default="exported")

    args = p.parse_args(argv)
    try:
        if args.cmd == "fixture":
            result = train_fixture(seed=args.seed, out_dir=args.out)
            print(f"bundle at {result['out_dir']} (train accuracy {result['accuracy']:.3f})")
        else:
            shape = tuple(int(v) for v in args.input_shape.split(","))
            model = torch.load(args.checkpoint, weights_only=False)
            manifest = export_weights(model, shape, args.out, args.manifest, name=args.name)
            print(f"wrote {args.out} (sha256 {manifest.weight_sha256[:16]}...)")
    except (ExportError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(2)


if __name__ == "__main__":
    main()
