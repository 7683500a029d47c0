"""The incremental protocol: train once, bank prototypes, evaluate task-free.

Methods:

- ``frozen``: first-session encoder, prototype classifier, no test-time
  adaptation (plain prediction path).
- ``first-session``: same encoder, evaluated through the batched TTA
  pipeline with its pre-adaptation predictions (a cross-check of the two
  code paths; numerically the frozen baseline).
- ``tta``: full method — per-batch entropy minimization with reset.
- ``finetune``: adapters re-trained on every task in sequence, the
  forgetting foil.

Evaluation after task t covers the union of the test sets of tasks 1..t;
the prediction path never sees a task id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TaskStream, corrupt_batch
from .encoder import Encoder, EncoderConfig
from .phase1 import Phase1Config, train_first_session
from .prototypes import PrototypeBank, compute_prototypes
from .tta import TTAConfig, predict_with_reset

METHODS = ("frozen", "first-session", "tta", "finetune")


@dataclass
class MetricsReport:
    """Per-task top-1 accuracies with their mean and final value."""

    task_accuracies: list
    mean_accuracy: float
    final_accuracy: float


def compute_metrics(task_accuracies):
    accs = [float(a) for a in task_accuracies]
    if not accs:
        raise ValueError("no task accuracies")
    if any(a < 0 or a > 1 for a in accs):
        raise ValueError("accuracies must lie in [0, 1]")
    return MetricsReport(
        task_accuracies=accs,
        mean_accuracy=float(np.mean(accs)),
        final_accuracy=accs[-1],
    )


@dataclass
class RunResult:
    metrics: MetricsReport
    batch_logs: list          # list (per task) of lists of BatchLog
    phase1_loss_log: list
    checkpoint: object        # the first-session checkpoint E*
    bank: PrototypeBank


def _remap(labels, class_ids):
    lut = {k: i for i, k in enumerate(class_ids)}
    return np.array([lut[int(y)] for y in labels], dtype=int)


def _batches(images, labels, sample_ids, batch_size):
    for i in range(0, len(images), batch_size):
        yield images[i:i + batch_size], labels[i:i + batch_size], sample_ids[i:i + batch_size]


def _eval_plain(encoder, bank, images, labels, batch_size):
    # batch exactly like the TTA path so degenerate TTA (lr=0) matches bitwise
    preds = [bank.predict(encoder.encode_np(images[i:i + batch_size]))
             for i in range(0, len(images), batch_size)]
    return float(np.mean(np.concatenate(preds) == np.asarray(labels)))


def run_protocol(encoder_cfg: EncoderConfig, stream: TaskStream, method: str,
                 phase1_cfg: Phase1Config, tta_cfg: TTAConfig, seed: int,
                 corruption=None):
    """One full incremental run; returns a :class:`RunResult`.

    ``corruption`` (a CorruptionSpec or None) is applied to test images
    only.  The first task's training data is the only labeled data any
    method other than ``finetune`` ever trains on.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if not stream.tasks:
        raise ValueError("empty task stream")

    rng = np.random.default_rng(seed)
    encoder = Encoder(encoder_cfg, rng)

    first = stream.tasks[0]
    phase1_log = []
    if phase1_cfg.enabled and method != "finetune":
        checkpoint, phase1_log = train_first_session(
            encoder, first.train_images, _remap(first.train_labels, first.class_ids),
            Phase1Config(**{**phase1_cfg.__dict__, "seed": seed}))
    else:
        checkpoint = encoder.store.snapshot()

    bank = PrototypeBank(encoder_cfg.embed_dim)
    accuracies = []
    all_logs = []

    # accumulated clean test pool for task-agnostic evaluation
    seen_images = np.zeros((0, encoder_cfg.image_size, encoder_cfg.image_size))
    seen_labels = np.zeros(0, dtype=int)
    seen_ids = np.zeros(0, dtype=int)

    for task in stream.tasks:
        if method == "finetune":
            # sequential adapter training: the forgetting foil
            train_first_session(
                encoder, task.train_images, _remap(task.train_labels, task.class_ids),
                Phase1Config(**{**phase1_cfg.__dict__, "seed": seed + task.index}))
            checkpoint = encoder.store.snapshot()
        else:
            encoder.store.restore(checkpoint)

        feats = encoder.encode_np(task.train_images)
        protos, counts = compute_prototypes(feats, task.train_labels, task.class_ids)
        bank.extend(protos, counts)

        seen_images = np.concatenate([seen_images, task.test_images])
        seen_labels = np.concatenate([seen_labels, task.test_labels])
        seen_ids = np.concatenate([seen_ids, task.test_sample_ids])

        test_images = seen_images
        if corruption is not None:
            test_images = corrupt_batch(seen_images, corruption)

        if method in ("frozen", "finetune"):
            encoder.store.restore(checkpoint)
            accuracies.append(_eval_plain(encoder, bank, test_images, seen_labels,
                                          tta_cfg.batch_size))
            all_logs.append([])
        else:
            batches = list(_batches(test_images, seen_labels, seen_ids,
                                    tta_cfg.batch_size))
            preds, logs = predict_with_reset(encoder, checkpoint, batches, bank,
                                             tta_cfg, global_seed=seed)
            which = 0 if method == "first-session" else 1
            flat = np.concatenate([p[which] for p in preds])
            accuracies.append(float(np.mean(flat == seen_labels)))
            all_logs.append(logs)

    return RunResult(
        metrics=compute_metrics(accuracies),
        batch_logs=all_logs,
        phase1_loss_log=phase1_log,
        checkpoint=checkpoint,
        bank=bank,
    )
