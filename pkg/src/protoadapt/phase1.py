"""First-session training: adapters (plus a temporary head) on task 1.

The trunk and the layer-norm parameters stay frozen here; norms are left
at the backbone's statistics so test-time adaptation starts from them.
SGD with momentum, cosine annealing over all steps, no weight decay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import OptimizerState, Tensor, sgd_step


@dataclass(frozen=True)
class Phase1Config:
    epochs: int = 20
    base_lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0
    enabled: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def attach_head(encoder, num_classes):
    """Append a zero-init linear head (embed_dim -> K) for training only."""
    if num_classes < 2:
        raise ValueError("head needs at least 2 classes")
    d = encoder.config.embed_dim
    encoder.store.add("head/w", np.zeros((d, num_classes)), "head")
    encoder.store.add("head/b", np.zeros(num_classes), "head")


def head_logits(encoder, features):
    s = encoder.store
    return ag.matmul(features, s["head/w"]) + s["head/b"]


def cross_entropy(logits, labels):
    """Batch-averaged -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=int)
    k = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    onehot = np.zeros((labels.size, k))
    onehot[np.arange(labels.size), labels] = 1.0
    logp = ag.log(ag.softmax(logits, axis=-1))
    return ag.scale(ag.mean(ag.tsum(ag.mul(logp, Tensor(onehot)), axis=-1)), -1.0)


def train_first_session(encoder, images, labels, cfg: Phase1Config,
                        trainable_groups=("adapter", "head")):
    """Train on one task's data; returns (checkpoint of E*, loss log).

    ``labels`` must already be indices into [0, K).  The head is attached,
    trained together with the adapters, and dropped before the snapshot,
    so the returned checkpoint is head-free.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if images.shape[0] == 0:
        raise ValueError("empty training set")
    k = int(labels.max()) + 1
    attach_head(encoder, max(k, 2))

    params = [t for g in trainable_groups for t in encoder.store.by_group(g)]
    n = images.shape[0]
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * batches_per_epoch
    state = OptimizerState(base_lr=cfg.base_lr, momentum=cfg.momentum,
                           total_steps=total_steps)

    rng = np.random.default_rng(cfg.seed)
    loss_log = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            with ag.Tape() as tape:
                feats = encoder.encode(images[idx])
                loss = cross_entropy(head_logits(encoder, feats), labels[idx])
                grads = tape.backward(loss, params=params)
            lr = state.lr_at(step)
            sgd_step(params, grads, state, step)
            epoch_losses.append(loss.item())
            step += 1
        loss_log.append((epoch, lr, float(np.mean(epoch_losses))))

    encoder.store.drop_group("head")
    return encoder.store.snapshot(), loss_log


def write_loss_log(path, loss_log):
    with open(path, "w") as f:
        f.write("epoch,lr,mean_loss\n")
        for epoch, lr, loss in loss_log:
            f.write(f"{epoch},{lr!r},{loss!r}\n")
