#!/usr/bin/env python3
"""Train every component on a config, then evaluate and draw a few samples.

    python3 scripts/run_pipeline.py configs/tiny.json
    python3 scripts/run_pipeline.py configs/reference.json --skip-train
"""
import argparse
import sys
from pathlib import Path

from idsynth.cli import main as idsynth


def run(base: list[str], *args: str) -> None:
    code = idsynth(base + list(args))
    if code:
        sys.exit(code)


def parse_args():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config", type=Path)
    p.add_argument("--runs-root", help="override paths.runs_root")
    p.add_argument("--skip-train", action="store_true", help="reuse the checkpoints already in the run directory")
    p.add_argument("--samples", type=int, default=4, help="guided samples to draw per alpha endpoint")
    return p.parse_args()


def main():
    args = parse_args()
    base = ["--config", str(args.config), "-q"]
    if args.runs_root:
        base += ["--runs-root", args.runs_root]
    run(base, "gen-data")
    if not args.skip_train:
        run(base, "train", "all")
    for k in range(args.samples):
        for alpha in ("1", "0"):
            run(base, "sample", "--identity", f"h{k % 2}", "--style-seed", str(k), "--alpha", alpha)
    run(base, "sample", "--multi", "h0@0.3,0.5,0.3;h1@0.72,0.5,0.3")
    run(base, "eval")


if __name__ == "__main__":
    main()
