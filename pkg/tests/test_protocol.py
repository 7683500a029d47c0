import numpy as np
import pytest

from protoadapt.data import SynthSpec, build_task_stream, synth_dataset
from protoadapt.encoder import AdapterConfig, EncoderConfig
from protoadapt.phase1 import Phase1Config
from protoadapt.protocol import compute_metrics, run_protocol
from protoadapt.tta import TTAConfig


def tiny_setup(num_classes=4, increments=(2, 2), seed=0):
    enc_cfg = EncoderConfig(image_size=8, patch_size=4, embed_dim=16, depth=2,
                            heads=2, adapter=AdapterConfig(hidden_dim=4))
    spec = SynthSpec(num_classes=num_classes, train_per_class=8, test_per_class=4,
                     image_size=8)
    ds = synth_dataset(spec, np.random.default_rng(100 + seed))
    stream = build_task_stream(ds, increments, order_seed=0)
    p1 = Phase1Config(epochs=2, batch_size=8)
    tta = TTAConfig(aug_count=2, batch_size=8)
    return enc_cfg, stream, p1, tta


# ------------------------------------------------------------------- metrics


def test_metrics_hand_values():
    m = compute_metrics([0.9, 0.8, 0.7])
    assert m.mean_accuracy == pytest.approx(0.8)
    assert m.final_accuracy == 0.7
    assert m.task_accuracies == [0.9, 0.8, 0.7]


def test_metrics_single_entry():
    m = compute_metrics([0.42])
    assert m.mean_accuracy == m.final_accuracy == 0.42


def test_metrics_permutation_keeps_mean():
    a = compute_metrics([0.9, 0.8, 0.7])
    b = compute_metrics([0.7, 0.9, 0.8])
    assert a.mean_accuracy == pytest.approx(b.mean_accuracy)
    assert a.final_accuracy != b.final_accuracy


def test_metrics_validation():
    with pytest.raises(ValueError):
        compute_metrics([])
    with pytest.raises(ValueError):
        compute_metrics([1.2])


# ------------------------------------------------------------------ protocol


def test_unknown_method_rejected():
    enc_cfg, stream, p1, tta = tiny_setup()
    with pytest.raises(ValueError):
        run_protocol(enc_cfg, stream, "oracle", p1, tta, 0)


def test_single_task_mean_equals_final():
    enc_cfg, stream, p1, tta = tiny_setup(num_classes=2, increments=(2,))
    r = run_protocol(enc_cfg, stream, "frozen", p1, tta, 0)
    assert r.metrics.mean_accuracy == r.metrics.final_accuracy


def test_frozen_equals_lr_zero_tta_bitwise():
    enc_cfg, stream, p1, tta = tiny_setup()
    frozen = run_protocol(enc_cfg, stream, "frozen", p1, tta, 0)
    degenerate = run_protocol(enc_cfg, stream, "tta", p1,
                              TTAConfig(aug_count=2, batch_size=8, lr=0.0), 0)
    assert frozen.metrics.task_accuracies == degenerate.metrics.task_accuracies


def test_first_session_equals_tta_pre_adaptation_logs():
    enc_cfg, stream, p1, tta = tiny_setup()
    fs = run_protocol(enc_cfg, stream, "first-session", p1, tta, 0)
    tt = run_protocol(enc_cfg, stream, "tta", p1, tta, 0)
    for fs_logs, tt_logs in zip(fs.batch_logs, tt.batch_logs):
        for a, b in zip(fs_logs, tt_logs):
            assert a.pre_accuracy == b.pre_accuracy
            assert a.pre_entropy == b.pre_entropy
    fs_acc = fs.metrics.task_accuracies
    pre_from_tta = [float(np.mean([np.repeat(l.pre_accuracy, 1) for l in logs]))
                    for logs in tt.batch_logs]
    assert len(fs_acc) == len(pre_from_tta)


def test_run_is_deterministic():
    enc_cfg, stream, p1, tta = tiny_setup()
    a = run_protocol(enc_cfg, stream, "tta", p1, tta, 3)
    b = run_protocol(enc_cfg, stream, "tta", p1, tta, 3)
    assert a.metrics.task_accuracies == b.metrics.task_accuracies
    for la, lb in zip(a.batch_logs, b.batch_logs):
        for x, y in zip(la, lb):
            assert x.post_entropy == y.post_entropy


def test_bank_covers_seen_classes_incrementally():
    enc_cfg, stream, p1, tta = tiny_setup(num_classes=6, increments=(2, 2, 2))
    r = run_protocol(enc_cfg, stream, "frozen", p1, tta, 0)
    assert sorted(r.bank.class_ids) == sorted(
        k for t in stream.tasks for k in t.class_ids)
    assert len(r.metrics.task_accuracies) == 3


def test_checkpoint_is_head_free_and_restorable():
    enc_cfg, stream, p1, tta = tiny_setup()
    r = run_protocol(enc_cfg, stream, "tta", p1, tta, 0)
    groups = {g for g, _ in r.checkpoint.entries.values()}
    assert "head" not in groups


def test_early_task_accuracy_independent_of_later_tasks():
    # protocol purity: A_1, A_2 computable online, unaffected by task 3
    enc_cfg, stream3, p1, tta = tiny_setup(num_classes=6, increments=(2, 2, 2))
    short_stream = build_task_stream(
        synth_dataset(SynthSpec(num_classes=6, train_per_class=8, test_per_class=4,
                                image_size=8), np.random.default_rng(100)),
        (2, 2), order_seed=0)
    long_run = run_protocol(enc_cfg, stream3, "tta", p1, tta, 0)
    short_run = run_protocol(enc_cfg, short_stream, "tta", p1, tta, 0)
    assert long_run.metrics.task_accuracies[:2] == short_run.metrics.task_accuracies


def test_finetune_trains_every_task():
    enc_cfg, stream, p1, tta = tiny_setup(num_classes=4, increments=(2, 2))
    r = run_protocol(enc_cfg, stream, "finetune", p1, tta, 0)
    assert len(r.metrics.task_accuracies) == 2
    # finetune produces no Phase-I loss log for task 1 only; logs stay per-batch empty
    assert r.batch_logs == [[], []]


def test_corruption_applies_to_test_only():
    from protoadapt.data import CorruptionSpec
    enc_cfg, stream, p1, tta = tiny_setup()
    clean = run_protocol(enc_cfg, stream, "frozen", p1, tta, 0)
    corrupted = run_protocol(enc_cfg, stream, "frozen", p1, tta, 0,
                             corruption=CorruptionSpec("gaussian", 5, 0))
    # same training (checkpoint identical), different evaluation
    assert clean.checkpoint == corrupted.checkpoint
    assert clean.metrics.task_accuracies != corrupted.metrics.task_accuracies
