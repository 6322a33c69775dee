#!/usr/bin/env python3
"""Run every pipeline stage on one fold of the desk dataset.

Drives the installed CLI command by command, so the printed JSON lines are
exactly what a terminal run would show. Stops at the first failing stage.
"""

import argparse
import sys

from enteroseg.cli import main as cli


def run(argv):
    print("$ enteroseg " + " ".join(argv), file=sys.stderr)
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.json")
    ap.add_argument("--fold", type=int, default=0)
    ap.add_argument("--classes", type=int, nargs="+", default=[1, 2, 3],
                    help="organ classes to refine in stage 2")
    args = ap.parse_args()

    base = ["--config", args.config]
    fold = ["--fold", str(args.fold)]
    run(["phantom"] + base)
    run(["convert"] + base)
    run(["split"] + base)
    run(["train_coarse"] + base + fold)
    run(["predict_coarse"] + base + fold)
    run(["extract_roi"] + base + fold)
    for c in args.classes:
        run(["train_organ"] + base + fold + ["--class", str(c)])
    run(["evaluate"] + base + fold)
    run(["report"] + base + fold)


if __name__ == "__main__":
    main()
