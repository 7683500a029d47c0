#!/usr/bin/env python3
"""Sensitivity to class-to-task ordering on the toy benchmark.

Re-runs the frozen baseline and the adaptation method under several
seed-determined class orderings and prints the ordering table.

    python3 scripts/run_ordering.py [--outdir results] [--orders 0,1,2]
"""

import argparse
import os
import sys
from dataclasses import replace

from protoadapt.cli import main as cli, run_experiment
from protoadapt.config import parse_config

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIG = os.path.join(HERE, "..", "configs", "toy.yaml")


def run():
    parser = argparse.ArgumentParser()
    parser.add_argument("--outdir", default="results")
    parser.add_argument("--orders", default="0,1,2")
    args = parser.parse_args()
    os.makedirs(args.outdir, exist_ok=True)
    out = os.path.join(args.outdir, "ordering.jsonl")
    base = replace(parse_config(CONFIG), methods=("frozen", "tta"), output=out)
    for order in (int(s) for s in args.orders.split(",")):
        cfg = replace(base, stream=replace(base.stream, order_seed=order))
        run_experiment(cfg, out_path=out, idempotent=True)
    return cli(["report", "--table", "ordering", "--in", out])


if __name__ == "__main__":
    sys.exit(run())
