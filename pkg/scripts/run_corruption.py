#!/usr/bin/env python3
"""Robustness to test-time corruption on the toy benchmark.

Evaluates the frozen baseline and the adaptation method on test sets
corrupted with gaussian, shot, or impulse noise at severities 1-5, plus
the clean reference, and prints the corruption table.

    python3 scripts/run_corruption.py [--outdir results] [--severities 3]
"""

import argparse
import os
import sys
from dataclasses import replace

from protoadapt.cli import main as cli, run_experiment
from protoadapt.config import parse_config
from protoadapt.data import CORRUPTION_KINDS, CorruptionSpec

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIG = os.path.join(HERE, "..", "configs", "toy.yaml")


def run():
    parser = argparse.ArgumentParser()
    parser.add_argument("--outdir", default="results")
    parser.add_argument("--severities", default="3",
                        help="comma-separated severities (1-5)")
    args = parser.parse_args()
    os.makedirs(args.outdir, exist_ok=True)
    out = os.path.join(args.outdir, "corruption.jsonl")
    base = replace(parse_config(CONFIG),
                   methods=("frozen", "first-session", "tta"), output=out)

    run_experiment(replace(base, corruption=None), out_path=out, idempotent=True)
    for kind in CORRUPTION_KINDS:
        for sev in (int(s) for s in args.severities.split(",")):
            cfg = replace(base, corruption=CorruptionSpec(kind, sev, 0))
            run_experiment(cfg, out_path=out, idempotent=True)
    return cli(["report", "--table", "corruption", "--in", out])


if __name__ == "__main__":
    sys.exit(run())
