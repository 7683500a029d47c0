"""Datasets, corruptions and task streams.

Synthetic images are built from one smooth random template per class
(flip-symmetric so crops/flips/rotations stay label-preserving), with
per-sample shift/intensity jitter and pixel noise.  Real data comes in
through IDX files (big-endian magic, dims, raw bytes).  Corruptions are
the three noise kinds at five severity levels; the severity constants
follow the common-corruptions convention.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

GAUSSIAN_SIGMA = {1: 0.08, 2: 0.12, 3: 0.18, 4: 0.26, 5: 0.38}
SHOT_RATE = {1: 60.0, 2: 25.0, 3: 12.0, 4: 5.0, 5: 3.0}
IMPULSE_FRACTION = {1: 0.03, 2: 0.06, 3: 0.09, 4: 0.17, 5: 0.27}

CORRUPTION_KINDS = ("gaussian", "shot", "impulse")


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Per-split images in [0,1] (N,H,W) with integer labels (N,)."""

    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    @property
    def classes(self):
        return sorted(set(self.train_labels.tolist()))


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 10
    train_per_class: int = 30
    test_per_class: int = 15
    image_size: int = 16
    template_smoothness: float = 3.0
    shift_max: int = 0
    intensity_jitter: float = 0.05
    pixel_noise: float = 0.03


def _class_templates(num_classes, size, smoothness, rng):
    """Mid-gray images carrying mutually orthogonal smooth patterns.

    Patterns are zero-mean, flip-symmetric and orthonormalized, so raw
    dot products between a sample and the class means separate classes
    cleanly, and flip augmentations stay label-preserving.
    """
    patterns = []
    for _ in range(num_classes):
        t = ndimage.gaussian_filter(rng.normal(size=(size, size)), smoothness)
        t = (t + t[:, ::-1] + t[::-1, :] + t[::-1, ::-1]) / 4.0
        t -= t.mean()
        v = t.reshape(-1)
        for u in patterns:
            v = v - (v @ u) * u
        n = np.linalg.norm(v)
        if n < 1e-9:
            raise ValueError("degenerate template draw; use a different rng")
        patterns.append(v / n)
    amp = 2.0  # unit-norm pattern -> per-pixel std amp/size, peaks ~0.5
    return [np.clip(0.5 + amp * p.reshape(size, size), 0.0, 1.0)
            for p in patterns]


def synth_dataset(spec: SynthSpec, rng):
    """Procedural dataset with one smooth template per class."""
    templates = _class_templates(spec.num_classes, spec.image_size,
                                 spec.template_smoothness, rng)

    def sample(k):
        img = templates[k]
        if spec.shift_max > 0:
            dy, dx = rng.integers(-spec.shift_max, spec.shift_max + 1, size=2)
            img = np.roll(img, (dy, dx), axis=(0, 1))
        gain = 1.0 + rng.uniform(-spec.intensity_jitter, spec.intensity_jitter)
        img = img * gain + rng.normal(0.0, spec.pixel_noise, size=img.shape)
        return np.clip(img, 0.0, 1.0)

    def split(per_class):
        images, labels = [], []
        for k in range(spec.num_classes):
            for _ in range(per_class):
                images.append(sample(k))
                labels.append(k)
        return np.stack(images), np.array(labels, dtype=int)

    tr_x, tr_y = split(spec.train_per_class)
    te_x, te_y = split(spec.test_per_class)
    return Dataset(tr_x, tr_y, te_x, te_y)


# ------------------------------------------------------------------- IDX io


def _read_idx(path, expected_magic, what):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise IdxFormatError(f"{what}: truncated header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise IdxFormatError(f"{what}: bad magic 0x{magic:08x}")
    if expected_magic == IDX_IMAGES_MAGIC:
        if len(raw) < 16:
            raise IdxFormatError(f"{what}: truncated dimension header")
        rows, cols = struct.unpack(">II", raw[8:16])
        payload = raw[16:]
        if len(payload) != count * rows * cols:
            raise IdxFormatError(
                f"{what}: payload has {len(payload)} bytes, "
                f"expected {count * rows * cols}")
        data = np.frombuffer(payload, dtype=np.uint8)
        return data.reshape(count, rows, cols).astype(np.float64) / 255.0
    payload = raw[8:]
    if len(payload) != count:
        raise IdxFormatError(f"{what}: payload has {len(payload)} bytes, expected {count}")
    return np.frombuffer(payload, dtype=np.uint8).astype(int)


def load_idx(images_path, labels_path):
    """Read an IDX image/label file pair; returns (images in [0,1], labels)."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    return images, labels


def write_idx(images_path, labels_path, images, labels):
    """Inverse of load_idx (images quantized back to bytes)."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    b = np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, b.shape[0], b.shape[1], b.shape[2]))
        f.write(b.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


# -------------------------------------------------------------- corruptions


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "gaussian"
    severity: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in range(1, 6):
            raise ValueError("severity must be in 1..5")


def apply_corruption(image, spec: CorruptionSpec):
    """Pure function of (image, spec); output clamped to [0,1]."""
    image = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed, hash_image(image)]))
    if spec.kind == "gaussian":
        out = image + rng.normal(0.0, GAUSSIAN_SIGMA[spec.severity], size=image.shape)
    elif spec.kind == "shot":
        lam = SHOT_RATE[spec.severity]
        out = rng.poisson(np.maximum(image, 0.0) * lam) / lam
    else:  # impulse
        rho = IMPULSE_FRACTION[spec.severity]
        out = image.copy()
        mask = rng.random(image.shape) < rho
        out[mask] = rng.integers(0, 2, size=int(mask.sum())).astype(np.float64)
    return np.clip(out, 0.0, 1.0)


def hash_image(image):
    """Stable 63-bit content hash, used to key per-image corruption noise."""
    b = np.ascontiguousarray(image, dtype=np.float64).tobytes()
    h = 1469598103934665603
    for chunk in np.frombuffer(b, dtype=np.uint64):
        h = (h ^ int(chunk)) * 1099511628211 % (1 << 63)
    return h


def corrupt_batch(images, spec: CorruptionSpec):
    return np.stack([apply_corruption(x, spec) for x in images])


# ------------------------------------------------------------- task streams


@dataclass
class Task:
    index: int
    class_ids: list
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    test_sample_ids: np.ndarray


@dataclass
class TaskStream:
    tasks: list
    order_seed: int

    def __len__(self):
        return len(self.tasks)

    @property
    def all_classes(self):
        return [k for t in self.tasks for k in t.class_ids]


def build_task_stream(dataset: Dataset, increments, order_seed=0):
    """Partition classes into tasks with disjoint label spaces.

    ``increments``: classes per task, summing to at most the number of
    classes.  Class-to-task assignment follows a seed-determined
    permutation; splits are carried over from the source dataset.
    """
    classes = dataset.classes
    increments = list(increments)
    if sum(increments) > len(classes):
        raise ValueError(
            f"increments sum to {sum(increments)} but dataset has "
            f"{len(classes)} classes")
    perm = np.random.default_rng(order_seed).permutation(len(classes))
    ordered = [classes[i] for i in perm]

    tasks = []
    cursor = 0
    next_sample_id = 0
    for t, inc in enumerate(increments):
        ids = sorted(ordered[cursor:cursor + inc])
        cursor += inc
        tr = np.isin(dataset.train_labels, ids)
        te = np.isin(dataset.test_labels, ids)
        n_test = int(te.sum())
        tasks.append(Task(
            index=t,
            class_ids=ids,
            train_images=dataset.train_images[tr],
            train_labels=dataset.train_labels[tr],
            test_images=dataset.test_images[te],
            test_labels=dataset.test_labels[te],
            test_sample_ids=np.arange(next_sample_id, next_sample_id + n_test),
        ))
        next_sample_id += n_test
    return TaskStream(tasks=tasks, order_seed=order_seed)
