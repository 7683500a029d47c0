"""Experiment CLI: run configs, tabulate results, plot accuracy curves.

Results are line-delimited JSON, one run per line, each embedding the
resolved config so report tables are self-describing.  Exit codes:
0 success, 1 config error, 2 runtime error.  Worker count for the run
fan-out comes from the PROTOADAPT_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import ConfigError, ExperimentConfig, config_to_dict, parse_config, parse_method_spec
from .data import build_task_stream, synth_dataset
from .protocol import run_protocol

TABLES = ("headline", "ablation-params", "ablation-iters", "ablation-batch",
          "ablation-aug", "ordering", "corruption")


def _single_run(args):
    cfg_dict, method_spec, seed = args
    cfg = _config_from_echo(cfg_dict)
    method, tta = parse_method_spec(method_spec, cfg.tta)
    ds = synth_dataset(cfg.dataset, np.random.default_rng(1000 + seed))
    stream = build_task_stream(ds, cfg.stream.increments,
                               order_seed=cfg.stream.order_seed)
    result = run_protocol(cfg.encoder, stream, method, cfg.phase1, tta, seed,
                          corruption=cfg.corruption)
    record = {
        "method": method_spec,
        "seed": seed,
        "task_accuracies": result.metrics.task_accuracies,
        "mean_accuracy": result.metrics.mean_accuracy,
        "final_accuracy": result.metrics.final_accuracy,
        "tta": {"param_mode": tta.param_mode, "iterations": tta.iterations,
                "batch_size": tta.batch_size, "aug_count": tta.aug_count,
                "lr": tta.lr, "reset_policy": tta.reset_policy},
        "batch_logs": [
            [{"batch_id": b.batch_id, "pre_entropy": b.pre_entropy,
              "post_entropy": b.post_entropy, "pre_accuracy": b.pre_accuracy,
              "post_accuracy": b.post_accuracy} for b in task_logs]
            for task_logs in result.batch_logs],
        "config": cfg_dict,
    }
    record["run_key"] = _run_key(cfg_dict, method_spec, seed)
    return record


def _run_key(cfg_dict, method_spec, seed):
    blob = json.dumps({"config": cfg_dict, "method": method_spec, "seed": seed},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _config_from_echo(cfg_dict):
    from .config import parse_config_dict
    return parse_config_dict(json.loads(json.dumps(cfg_dict)))


def run_experiment(cfg: ExperimentConfig, out_path=None, idempotent=False):
    """Run every (method, seed) pair; append records to the results file."""
    cfg_dict = config_to_dict(cfg)
    out_path = out_path or cfg.output
    existing = set()
    lines = []
    if os.path.exists(out_path):
        with open(out_path) as f:
            lines = [ln for ln in f.read().splitlines() if ln.strip()]
        if idempotent:
            existing = {json.loads(ln).get("run_key") for ln in lines}

    jobs = [(cfg_dict, m, s) for m in cfg.methods for s in cfg.seeds
            if not (idempotent and _run_key(cfg_dict, m, s) in existing)]
    workers = int(os.environ.get("PROTOADAPT_WORKERS", "1"))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_single_run, jobs))
    else:
        records = [_single_run(j) for j in jobs]

    # write-then-rename so an interrupted run leaves no partial record
    new_lines = lines + [json.dumps(r) for r in records]
    d = os.path.dirname(os.path.abspath(out_path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".results-")
    with os.fdopen(fd, "w") as f:
        f.write("\n".join(new_lines) + "\n")
    os.replace(tmp, out_path)
    return records


def load_results(path):
    with open(path) as f:
        return [json.loads(ln) for ln in f.read().splitlines() if ln.strip()]


def _cell(values):
    if not values:
        return "  --  "
    m = float(np.mean(values))
    s = float(np.std(values)) if len(values) > 1 else 0.0
    return f"{100 * m:5.2f} +- {100 * s:4.2f}"


def _group_rows(records, row_key):
    rows = {}
    for r in records:
        rows.setdefault(row_key(r), []).append(r)
    return rows


def make_table(records, table):
    """Mean +- std of the accuracy metrics across seeds, per table row."""
    if table not in TABLES:
        raise ConfigError(f"unknown table {table!r}; expected one of {TABLES}")
    if table == "headline":
        row_key = lambda r: r["method"]
    elif table == "ablation-params":
        row_key = lambda r: r["tta"]["param_mode"]
    elif table == "ablation-iters":
        row_key = lambda r: f"N={r['tta']['iterations']}"
    elif table == "ablation-batch":
        row_key = lambda r: f"B={r['tta']['batch_size']}"
    elif table == "ablation-aug":
        row_key = lambda r: f"M={r['tta']['aug_count']}"
    elif table == "ordering":
        row_key = lambda r: f"order={r['config']['stream']['order_seed']}"
    else:  # corruption
        def row_key(r):
            c = r["config"].get("corruption")
            return "clean" if c is None else f"{c['kind']}-s{c['severity']}"

    rows = _group_rows(records, row_key)
    header = f"{'row':<24}  {'mean_acc (%)':<16}  {'final_acc (%)':<16}  runs"
    out = [header, "-" * len(header)]
    csv = ["row,mean_acc_mean,mean_acc_std,final_acc_mean,final_acc_std,runs"]
    for key in sorted(rows):
        rs = rows[key]
        abar = [r["mean_accuracy"] for r in rs]
        alast = [r["final_accuracy"] for r in rs]
        out.append(f"{key:<24}  {_cell(abar):<16}  {_cell(alast):<16}  {len(rs)}")
        csv.append(f"{key},{np.mean(abar)},{np.std(abar)},"
                   f"{np.mean(alast)},{np.std(alast)},{len(rs)}")
    return "\n".join(out), "\n".join(csv)


def plot_results(records, out_path):
    """Accuracy-vs-task curves per method, written as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    by_method = _group_rows(records, lambda r: r["method"])
    for method, rs in sorted(by_method.items()):
        curves = np.array([r["task_accuracies"] for r in rs])
        tasks = np.arange(1, curves.shape[1] + 1)
        mean = curves.mean(axis=0)
        ax.plot(tasks, 100 * mean, marker="o", label=method)
        if len(rs) > 1:
            std = curves.std(axis=0)
            ax.fill_between(tasks, 100 * (mean - std), 100 * (mean + std), alpha=0.2)
    ax.set_xlabel("task")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def main(argv=None):
    parser = argparse.ArgumentParser(prog="protoadapt")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seeds", help="comma-separated seed override")
    p_run.add_argument("--out", help="results file override")
    p_run.add_argument("--idempotent", action="store_true",
                       help="skip runs already present in the results file")

    p_rep = sub.add_parser("report", help="tabulate a results file")
    p_rep.add_argument("--table", required=True, choices=TABLES)
    p_rep.add_argument("--in", dest="inp", required=True)
    p_rep.add_argument("--csv", help="also write the table as CSV here")

    p_plot = sub.add_parser("plot", help="accuracy-vs-task curves as SVG")
    p_plot.add_argument("--in", dest="inp", required=True)
    p_plot.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cfg = parse_config(args.config)
            if args.seeds:
                from dataclasses import replace
                cfg = replace(cfg, seeds=tuple(int(s) for s in args.seeds.split(",")))
            out = args.out or cfg.output
            records = run_experiment(cfg, out_path=out, idempotent=args.idempotent)
            print(f"wrote {len(records)} records to {out}")
        elif args.command == "report":
            text, csv = make_table(load_results(args.inp), args.table)
            print(text)
            if args.csv:
                with open(args.csv, "w") as f:
                    f.write(csv + "\n")
        else:
            plot_results(load_results(args.inp), args.out)
            print(f"wrote {args.out}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
