"""Per-batch test-time refinement with model reset.

For each test batch: restore the first-session checkpoint, draw M random
augmentations per sample, average the per-view predictive distributions,
take one (or N) SGD steps on the mean marginal entropy over the selected
parameter group, predict on the clean samples, and move on.  Per-batch
RNG is keyed by (global seed, sample ids), so adaptation of a batch does
not depend on where it sits in the stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autograd as ag
from .autograd import OptimizerState, Tensor, sgd_step

PARAM_MODES = ("norm", "adapter", "all")
RESET_POLICIES = ("per-batch", "none")


@dataclass(frozen=True)
class AugmentationPolicy:
    """Label-preserving random image transforms (crop/flip/rotate/jitter)."""

    crop_scale: tuple = (0.85, 1.0)
    flip_prob: float = 0.5
    max_rotation_deg: float = 5.0
    jitter: float = 0.1

    @classmethod
    def identity(cls):
        return cls(crop_scale=(1.0, 1.0), flip_prob=0.0,
                   max_rotation_deg=0.0, jitter=0.0)

    def is_identity(self):
        return self == AugmentationPolicy.identity()


@dataclass(frozen=True)
class TTAConfig:
    aug_count: int = 8          # M
    iterations: int = 1         # N
    batch_size: int = 16        # B
    lr: float = 0.01
    weight_decay: float = 0.0
    momentum: float = 0.9
    param_mode: str = "norm"
    reset_policy: str = "per-batch"
    predict_from_marginal: bool = False
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def __post_init__(self):
        if self.aug_count < 1 or self.iterations < 1 or self.batch_size < 1:
            raise ValueError("aug_count, iterations and batch_size must be positive")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.param_mode not in PARAM_MODES:
            raise ValueError(f"param_mode must be one of {PARAM_MODES}")
        if self.reset_policy not in RESET_POLICIES:
            raise ValueError(f"reset_policy must be one of {RESET_POLICIES}")


def _transform_once(img, policy, rng):
    h, w = img.shape
    out = img
    # random resized crop (bilinear)
    lo, hi = policy.crop_scale
    s = rng.uniform(lo, hi)
    if s < 1.0:
        ch, cw = max(2, int(round(h * s))), max(2, int(round(w * s)))
        top = rng.integers(0, h - ch + 1)
        left = rng.integers(0, w - cw + 1)
        crop = out[top:top + ch, left:left + cw]
        yy = np.linspace(0, ch - 1, h)
        xx = np.linspace(0, cw - 1, w)
        out = ndimage.map_coordinates(
            crop, np.meshgrid(yy, xx, indexing="ij"), order=1, mode="nearest")
    if policy.flip_prob > 0 and rng.random() < policy.flip_prob:
        out = out[:, ::-1]
    if policy.max_rotation_deg > 0:
        angle = rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg)
        out = ndimage.rotate(out, angle, reshape=False, order=1, mode="nearest")
    if policy.jitter > 0:
        brightness = rng.uniform(-policy.jitter, policy.jitter)
        contrast = 1.0 + rng.uniform(-policy.jitter, policy.jitter)
        m = out.mean()
        out = (out - m) * contrast + m + brightness
    return np.clip(out, 0.0, 1.0)


def augment(image, policy, rng, count):
    """``count`` independently transformed copies of one image, (M,H,W)."""
    if count < 1:
        raise ValueError("augmentation count must be positive")
    image = np.asarray(image, dtype=np.float64)
    if policy.is_identity():
        return np.repeat(image[None], count, axis=0)
    return np.stack([_transform_once(image, policy, rng) for _ in range(count)])


def batch_rng(global_seed, sample_ids):
    """Deterministic generator keyed by the batch's sample identity."""
    seq = np.random.SeedSequence([int(global_seed)] + [int(i) for i in sample_ids])
    return np.random.default_rng(seq)


def marginal_distribution(encoder, bank, views):
    """Mean of the per-view predictive distributions (Tensor path).

    ``views``: (M, H, W) augmented copies of one sample -> (K,) Tensor.
    """
    probs = bank.predict_proba(encoder.encode(views))
    return ag.mean(probs, axis=0)


def marginal_entropy(pbar):
    """Shannon entropy in nats, log floored at 1e-12."""
    if isinstance(pbar, Tensor):
        return ag.scale(ag.tsum(ag.mul(pbar, ag.log(pbar)), axis=-1), -1.0)
    p = np.asarray(pbar, dtype=np.float64)
    return float(-(p * np.log(np.maximum(p, ag.LOG_FLOOR))).sum(axis=-1))


def _batch_marginals(encoder, bank, batch_views):
    """(B, M, H, W) views -> (B, K) marginal distributions as a Tensor."""
    b, m, h, w = batch_views.shape
    probs = bank.predict_proba(encoder.encode(batch_views.reshape(b * m, h, w)))
    return ag.mean(ag.reshape(probs, (b, m, len(bank))), axis=1)


def adapt_on_batch(encoder, batch, bank, cfg: TTAConfig, rng, state=None):
    """N entropy-minimization steps on one batch; returns mean final loss.

    Fresh augmentations are drawn at every iteration.  The optimizer state
    (momentum velocity) is discarded with every model reset; without reset
    the caller passes a persistent ``state`` so momentum carries across
    batches.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    params = encoder.store.select(cfg.param_mode)
    if state is None:
        state = OptimizerState(base_lr=cfg.lr, momentum=cfg.momentum,
                               total_steps=None)
    loss_value = None
    for step in range(cfg.iterations):
        views = np.stack([augment(x, cfg.policy, rng, cfg.aug_count) for x in batch])
        with ag.Tape() as tape:
            pbar = _batch_marginals(encoder, bank, views)
            per_sample = ag.scale(ag.tsum(ag.mul(pbar, ag.log(pbar)), axis=-1), -1.0)
            loss = ag.mean(per_sample)
            grads = tape.backward(loss, params=params)
        sgd_step(params, grads, state, step)
        loss_value = loss.item()
    return loss_value


@dataclass
class BatchLog:
    batch_id: int
    sample_ids: list
    pre_entropy: float
    post_entropy: float
    pre_accuracy: float
    post_accuracy: float


def predict_with_reset(encoder, checkpoint, batches, bank, cfg: TTAConfig,
                       global_seed=0):
    """Adapt-and-predict over a stream of test batches.

    ``batches``: iterable of (images, labels, sample_ids).  Labels are used
    only for logging accuracies.  Returns (predictions per batch, logs).
    With ``reset_policy='per-batch'`` the model is restored to the
    checkpoint before every batch, which makes each batch's predictions
    independent of every other batch.
    """
    predictions, logs = [], []
    encoder.store.restore(checkpoint)
    # without reset, momentum persists across batches (reset is what
    # discards optimizer state)
    stream_state = OptimizerState(base_lr=cfg.lr, momentum=cfg.momentum,
                                  total_steps=None)
    for batch_id, (images, labels, sample_ids) in enumerate(batches):
        if cfg.reset_policy == "per-batch":
            encoder.store.restore(checkpoint)
            stream_state = OptimizerState(base_lr=cfg.lr, momentum=cfg.momentum,
                                          total_steps=None)
        rng = batch_rng(global_seed, sample_ids)
        images = np.asarray(images, dtype=np.float64)

        pre_probs = bank.predict_proba(encoder.encode_np(images))
        pre_pred = np.array(bank.class_ids)[pre_probs.argmax(axis=-1)]

        adapt_on_batch(encoder, images, bank, cfg, rng, state=stream_state)

        if cfg.predict_from_marginal:
            views = np.stack([augment(x, cfg.policy, rng, cfg.aug_count)
                              for x in images])
            post_probs = _batch_marginals(encoder, bank, views).data
        else:
            post_probs = bank.predict_proba(encoder.encode_np(images))
        post_pred = np.array(bank.class_ids)[post_probs.argmax(axis=-1)]

        labels = np.asarray(labels)
        logs.append(BatchLog(
            batch_id=batch_id,
            sample_ids=[int(i) for i in sample_ids],
            pre_entropy=float(np.mean([marginal_entropy(p) for p in pre_probs])),
            post_entropy=float(np.mean([marginal_entropy(p) for p in post_probs])),
            pre_accuracy=float(np.mean(pre_pred == labels)),
            post_accuracy=float(np.mean(post_pred == labels)),
        ))
        predictions.append((pre_pred, post_pred))
    if cfg.reset_policy == "per-batch":
        encoder.store.restore(checkpoint)
    return predictions, logs


def write_batch_logs(path, logs, cfg: TTAConfig):
    with open(path, "w") as f:
        f.write("batch_id,pre_entropy,post_entropy,pre_accuracy,post_accuracy,"
                "param_mode,iterations,aug_count,batch_size,lr\n")
        for b in logs:
            f.write(f"{b.batch_id},{b.pre_entropy!r},{b.post_entropy!r},"
                    f"{b.pre_accuracy!r},{b.post_accuracy!r},"
                    f"{cfg.param_mode},{cfg.iterations},{cfg.aug_count},"
                    f"{cfg.batch_size},{cfg.lr!r}\n")
