#!/usr/bin/env python3
"""Headline comparison on the toy benchmark.

Runs the frozen baseline, the first-session cross-check, the full
test-time-adaptation method, and the finetune-every-task foil over three
seeds, then prints the headline table and writes an accuracy curve.

    python3 scripts/run_headline.py [--out results/headline.jsonl]
"""

import argparse
import os
import sys

from protoadapt.cli import main as cli

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIG = os.path.join(HERE, "..", "configs", "toy.yaml")


def run():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="results/headline.jsonl")
    args = parser.parse_args()
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    rc = cli(["run", "--config", CONFIG, "--out", args.out, "--idempotent"])
    if rc:
        return rc
    rc = cli(["report", "--table", "headline", "--in", args.out])
    if rc:
        return rc
    return cli(["plot", "--in", args.out,
                "--out", os.path.splitext(args.out)[0] + ".svg"])


if __name__ == "__main__":
    sys.exit(run())
