"""Command line entry point: ``dxa3d [--config F] [--seed N] [--out DIR] <command>``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import harness
from .config import load_config


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dxa3d", description="Spine curve regression and 3D reconstruction on synthetic phantoms.")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="top-level seed (dataset, perturbations, training)")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", help="phantoms, masks, renders, curves and the split manifest")
    sub.add_parser("align", help="perturb each pair, align it and apply the IoU filter")
    sub.add_parser("train", help="train the regressor (plus CV folds / size sweep if configured)")
    sub.add_parser("eval", help="score the test split against the mean-curve baseline")
    rec = sub.add_parser("reconstruct", help="3D volumes from curve CSVs or dataset ids")
    rec.add_argument("--curves", nargs="*", default=[], help="CurveSet CSV files")
    rec.add_argument("--ids", nargs="*", default=[], help="dataset sample ids")
    sub.add_parser("report", help="write summary.txt for the run")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out:
            cfg = replace(cfg, output_dir=args.out)
        if args.command == "generate":
            recs = harness.cmd_generate(cfg)
            print(f"generated {len(recs)} samples in {harness.dataset_dir(cfg)}")
        elif args.command == "align":
            harness.cmd_align(cfg)
        elif args.command == "train":
            res = harness.cmd_train(cfg)
            h = res["history"][-1] if res["history"] else None
            if h is not None:
                print(f"trained {len(res['history'])} epochs: train loss {h.train_loss:.4f}, val loss {h.val_loss:.4f}")
        elif args.command == "eval":
            for r in harness.cmd_eval(cfg):
                print(r.text())
        elif args.command == "reconstruct":
            for path in harness.cmd_reconstruct(cfg, args.curves, args.ids):
                print(path)
        elif args.command == "report":
            print(harness.cmd_report(cfg), end="")
    except (FileNotFoundError, KeyError, ValueError, OSError) as exc:
        print(f"dxa3d {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
