"""Command line front end for the segmentation pipeline.

Every subcommand prints a single JSON object on stdout when it succeeds and a
single JSON error line on stderr (exit code 1) when it fails, so runs are easy
to drive from shell scripts.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline as pl

_COMMANDS = ("phantom", "convert", "split", "train_coarse", "predict_coarse",
             "extract_roi", "train_organ", "evaluate", "report")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="enteroseg",
        description="Coarse-to-fine gastrointestinal segmentation pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name: str, help_: str, fold=False, cls=False, cls_required=False,
            seed=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None,
                       help="JSON config file (defaults merged underneath)")
        p.add_argument("--out", default=None,
                       help="output root (overrides config)")
        if fold:
            p.add_argument("--fold", type=int, required=True)
        if cls:
            p.add_argument("--class", dest="class_name", default=None,
                           required=cls_required,
                           help="class id or organ name")
        if seed:
            p.add_argument("--seed", type=int, default=None)
        return p

    add("phantom", "generate a synthetic NIfTI dataset", seed=True)
    add("convert", "slice NIfTI volumes into PNG trees")
    add("split", "build patient-stratified folds", seed=True)
    add("train_coarse", "train the multiclass network on one fold",
        fold=True, seed=True)
    add("predict_coarse", "write per-slice multiclass predictions", fold=True)
    add("extract_roi", "cut padded per-class boxes from the predictions",
        fold=True, cls=True)
    add("train_organ", "train one binary refinement network",
        fold=True, cls=True, cls_required=True, seed=True)
    add("evaluate", "score both stages on the held-out patients",
        fold=True, cls=True)
    add("report", "render the stage comparison table", fold=True)
    return ap


def _dispatch(args) -> dict:
    overrides = {}
    if args.out is not None:
        overrides["out"] = args.out
    cfg = pl.load_config(args.config, overrides)
    cls = None
    if getattr(args, "class_name", None) is not None:
        cls = pl.resolve_class(args.class_name, int(cfg["n_classes"]))
    cmd = args.command
    if cmd == "phantom":
        return pl.cmd_phantom(cfg, seed=args.seed)
    if cmd == "convert":
        return pl.cmd_convert(cfg)
    if cmd == "split":
        return pl.cmd_split(cfg, seed=args.seed)
    if cmd == "train_coarse":
        return pl.cmd_train_coarse(cfg, args.fold, seed=args.seed)
    if cmd == "predict_coarse":
        return pl.cmd_predict_coarse(cfg, args.fold)
    if cmd == "extract_roi":
        return pl.cmd_extract_roi(cfg, args.fold, class_id=cls)
    if cmd == "train_organ":
        return pl.cmd_train_organ(cfg, args.fold, cls, seed=args.seed)
    if cmd == "evaluate":
        return pl.cmd_evaluate(cfg, args.fold, class_id=cls)
    if cmd == "report":
        return pl.cmd_report(cfg, args.fold)
    raise pl.PipelineError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = _dispatch(args)
    except pl.PipelineError as e:
        print(json.dumps(e.payload, sort_keys=True), file=sys.stderr)
        return 1
    except Exception as e:  # anything else still yields one parseable line
        print(json.dumps({"error": f"{type(e).__name__}: {e}"}),
              file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
