import numpy as np
import pytest

from protoadapt.cli import load_results, main, make_table, run_experiment
from protoadapt.config import (
    ConfigError,
    ExperimentConfig,
    config_to_dict,
    parse_config,
    parse_config_dict,
    parse_method_spec,
)


def write_config(tmp_path, text):
    p = tmp_path / "exp.yaml"
    p.write_text(text)
    return p


# ------------------------------------------------------------------ parsing


def test_empty_config_fills_published_defaults(tmp_path):
    cfg = parse_config(write_config(tmp_path, "{}"))
    assert cfg.tta.aug_count == 8
    assert cfg.tta.batch_size == 16
    assert cfg.tta.iterations == 1
    assert cfg.tta.lr == 0.01
    assert cfg.tta.weight_decay == 0.0
    assert cfg.phase1.epochs == 20
    assert cfg.phase1.base_lr == 0.01


def test_unknown_key_rejected_with_path(tmp_path):
    with pytest.raises(ConfigError, match="tta.step_count"):
        parse_config(write_config(tmp_path, "tta:\n  step_count: 3\n"))


def test_constraint_violation_rejected(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(write_config(tmp_path, "tta:\n  iterations: 0\n"))


def test_invalid_yaml_rejected(tmp_path):
    with pytest.raises(ConfigError, match="YAML"):
        parse_config(write_config(tmp_path, "tta: [unclosed\n"))


def test_nested_sections_parse(tmp_path):
    cfg = parse_config(write_config(tmp_path, """
encoder:
  embed_dim: 32
  heads: 2
  adapter:
    hidden_dim: 4
tta:
  policy:
    flip_prob: 0.0
corruption:
  kind: shot
  severity: 2
stream:
  increments: [3, 3, 4]
seeds: [5]
"""))
    assert cfg.encoder.embed_dim == 32
    assert cfg.encoder.adapter.hidden_dim == 4
    assert cfg.tta.policy.flip_prob == 0.0
    assert cfg.corruption.kind == "shot"
    assert cfg.stream.increments == (3, 3, 4)
    assert cfg.seeds == (5,)


def test_config_echo_roundtrip():
    cfg = ExperimentConfig()
    echoed = parse_config_dict(config_to_dict(cfg))
    assert echoed == cfg


# -------------------------------------------------------------- method specs


def test_method_spec_plain():
    cfg = ExperimentConfig()
    name, tta = parse_method_spec("tta", cfg.tta)
    assert name == "tta"
    assert tta == cfg.tta


def test_method_spec_overrides():
    cfg = ExperimentConfig()
    name, tta = parse_method_spec("tta?iterations=4&lr=0.1&reset_policy=none",
                                  cfg.tta)
    assert (name, tta.iterations, tta.lr, tta.reset_policy) == ("tta", 4, 0.1, "none")


def test_method_spec_unknown_method_or_key():
    cfg = ExperimentConfig()
    with pytest.raises(ConfigError):
        parse_method_spec("boost", cfg.tta)
    with pytest.raises(ConfigError):
        parse_method_spec("tta?steps=2", cfg.tta)


# ----------------------------------------------------------------- run + CLI


def small_config(tmp_path, methods="[frozen, tta]", seeds="[0]"):
    return write_config(tmp_path, f"""
encoder:
  image_size: 8
  patch_size: 4
  embed_dim: 16
  depth: 1
  heads: 2
  adapter:
    hidden_dim: 4
phase1:
  epochs: 1
  batch_size: 8
tta:
  aug_count: 2
  batch_size: 8
dataset:
  num_classes: 4
  train_per_class: 6
  test_per_class: 3
  image_size: 8
stream:
  increments: [2, 2]
methods: {methods}
seeds: {seeds}
output: {tmp_path / 'results.jsonl'}
""")


def test_run_experiment_record_count_and_echo(tmp_path):
    cfg = parse_config(small_config(tmp_path, seeds="[0, 1]"))
    records = run_experiment(cfg)
    assert len(records) == 4  # 2 methods x 2 seeds
    stored = load_results(cfg.output)
    assert len(stored) == 4
    assert stored[0]["config"]["dataset"]["num_classes"] == 4
    assert all(len(r["task_accuracies"]) == 2 for r in stored)


def test_run_experiment_idempotent_rerun(tmp_path):
    cfg = parse_config(small_config(tmp_path))
    first = run_experiment(cfg, idempotent=True)
    assert len(first) == 2
    again = run_experiment(cfg, idempotent=True)
    assert again == []
    assert len(load_results(cfg.output)) == 2


def test_run_determinism_across_invocations(tmp_path):
    cfg = parse_config(small_config(tmp_path, methods="[tta]"))
    a = run_experiment(cfg, out_path=tmp_path / "a.jsonl")
    b = run_experiment(cfg, out_path=tmp_path / "b.jsonl")
    assert a[0]["task_accuracies"] == b[0]["task_accuracies"]
    assert a[0]["batch_logs"] == b[0]["batch_logs"]


def test_report_table_and_stats(tmp_path):
    records = [
        {"method": "tta", "mean_accuracy": 0.8, "final_accuracy": 0.7,
         "tta": {"param_mode": "norm", "iterations": 1, "batch_size": 16,
                 "aug_count": 8, "lr": 0.01, "reset_policy": "per-batch"},
         "config": {"stream": {"order_seed": 0}, "corruption": None}},
        {"method": "tta", "mean_accuracy": 0.9, "final_accuracy": 0.8,
         "tta": {"param_mode": "norm", "iterations": 1, "batch_size": 16,
                 "aug_count": 8, "lr": 0.01, "reset_policy": "per-batch"},
         "config": {"stream": {"order_seed": 0}, "corruption": None}},
    ]
    text, csv = make_table(records, "headline")
    assert "tta" in text
    assert "85.00" in text  # mean of 0.8 and 0.9
    row = csv.splitlines()[1].split(",")
    assert float(row[1]) == pytest.approx(0.85)
    single, _ = make_table(records[:1], "ablation-iters")
    assert "0.00" in single  # single-seed std


def test_cli_exit_codes(tmp_path):
    missing = tmp_path / "nope.yaml"
    bad = write_config(tmp_path, "tta:\n  iterations: 0\n")
    assert main(["run", "--config", str(bad)]) == 1
    assert main(["run", "--config", str(missing)]) == 2


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = small_config(tmp_path, methods="[frozen]")
    out = tmp_path / "results.jsonl"
    assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert main(["report", "--table", "headline", "--in", str(out)]) == 0
    svg = tmp_path / "curve.svg"
    assert main(["plot", "--in", str(out), "--out", str(svg)]) == 0
    assert svg.read_text().lstrip().startswith("<?xml")
    captured = capsys.readouterr()
    assert "frozen" in captured.out


def test_cli_seed_override(tmp_path):
    cfg_path = small_config(tmp_path, methods="[frozen]", seeds="[0, 1, 2]")
    out = tmp_path / "results.jsonl"
    assert main(["run", "--config", str(cfg_path), "--seeds", "7",
                 "--out", str(out)]) == 0
    stored = load_results(out)
    assert [r["seed"] for r in stored] == [7]
