#!/usr/bin/env python3
"""Ablation grids on the toy benchmark.

Four grids, each varying one knob of the adaptation step via method-spec
overrides: parameter group, iteration count, batch size, augmentation
count.  Results accumulate in one file per grid; the matching table is
printed after each grid.

    python3 scripts/run_ablations.py [--outdir results]
"""

import argparse
import os
import sys
from dataclasses import replace

from protoadapt.cli import main as cli, run_experiment
from protoadapt.config import parse_config

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIG = os.path.join(HERE, "..", "configs", "toy.yaml")

GRIDS = {
    "ablation-params": ["tta?param_mode=norm", "tta?param_mode=adapter",
                        "tta?param_mode=all"],
    "ablation-iters": ["tta?iterations=1", "tta?iterations=2", "tta?iterations=4"],
    "ablation-batch": ["tta?batch_size=4", "tta?batch_size=16", "tta?batch_size=64"],
    "ablation-aug": ["tta?aug_count=2", "tta?aug_count=8", "tta?aug_count=16"],
}


def run():
    parser = argparse.ArgumentParser()
    parser.add_argument("--outdir", default="results")
    args = parser.parse_args()
    os.makedirs(args.outdir, exist_ok=True)
    base = parse_config(CONFIG)
    for table, methods in GRIDS.items():
        out = os.path.join(args.outdir, f"{table}.jsonl")
        cfg = replace(base, methods=tuple(methods), output=out)
        run_experiment(cfg, out_path=out, idempotent=True)
        rc = cli(["report", "--table", table, "--in", out])
        if rc:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(run())
