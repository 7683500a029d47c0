"""Per-class mean-embedding prototypes and dot-product softmax prediction.

A prototype is the arithmetic mean of the feature vectors of one class,
accumulated in dataset order for bitwise reproducibility.  Prediction is a
softmax over raw dot products between the feature and every stored
prototype; features are not L2-normalized by default (a cosine mode exists
for comparison).  During test-time adaptation the bank is a constant:
gradients flow through the feature only.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class EmptyClassError(ValueError):
    def __init__(self, class_id):
        super().__init__(f"class {class_id} has no samples")
        self.class_id = class_id


class ClassCollisionError(ValueError):
    def __init__(self, ids):
        super().__init__(f"class ids already present in bank: {sorted(ids)}")
        self.ids = ids


def compute_prototypes(features, labels, task_classes):
    """Mean feature per class over ``task_classes``.

    Returns (prototypes, counts): dicts keyed by class id.  Every label
    must belong to ``task_classes`` and every class must have at least one
    sample.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    task_classes = [int(k) for k in task_classes]
    extra = set(int(y) for y in labels) - set(task_classes)
    if extra:
        raise ValueError(f"labels outside the task's class set: {sorted(extra)}")
    protos, counts = {}, {}
    for k in task_classes:
        mask = labels == k
        n = int(mask.sum())
        if n == 0:
            raise EmptyClassError(k)
        # dataset-order summation, then divide: fixed order, reproducible
        protos[k] = features[mask].sum(axis=0) / n
        counts[k] = n
    return protos, counts


class PrototypeBank:
    """Ordered class-id -> prototype map; prototypes are immutable once in."""

    def __init__(self, embed_dim):
        self.embed_dim = int(embed_dim)
        self._protos = {}  # class id -> (d,) read-only ndarray
        self.class_counts = {}

    def __len__(self):
        return len(self._protos)

    @property
    def class_ids(self):
        return list(self._protos)

    def prototype(self, k):
        return self._protos[k]

    def extend(self, prototypes, counts):
        collisions = set(prototypes) & set(self._protos)
        if collisions:
            raise ClassCollisionError(collisions)
        for k, c in prototypes.items():
            c = np.array(c, dtype=np.float64)
            if c.shape != (self.embed_dim,):
                raise ag.ShapeError(
                    f"prototype for class {k} has shape {c.shape}, "
                    f"expected ({self.embed_dim},)"
                )
            c.setflags(write=False)
            self._protos[int(k)] = c
            self.class_counts[int(k)] = int(counts[k])

    def matrix(self):
        """(K, d) prototype matrix in insertion (class-seen) order."""
        if not self._protos:
            raise ValueError("prototype bank is empty")
        return np.stack(list(self._protos.values()))

    # -------------------------------------------------------------- predict

    def logits(self, z, cosine=False):
        """Dot products (or cosine similarities) with every prototype.

        ``z`` may be a Tensor (gradients flow through z, the bank is
        constant) or an ndarray of shape (..., d).
        """
        c = self.matrix()
        if cosine:
            c = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)
        ct = Tensor(c.T.copy())
        if isinstance(z, Tensor):
            if cosine:
                raise NotImplementedError("cosine mode is inference-only")
            return ag.matmul(z, ct)
        z = np.asarray(z, dtype=np.float64)
        if cosine:
            z = z / np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), 1e-12)
        return z @ c.T

    def predict_proba(self, z, cosine=False):
        """Softmax distribution over seen classes; rows sum to 1."""
        logits = self.logits(z, cosine=cosine)
        if isinstance(logits, Tensor):
            return ag.softmax(logits, axis=-1)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, z, cosine=False):
        """Class ids of the argmax prototypes, shape (...,)."""
        logits = self.logits(z, cosine=cosine)
        ids = np.array(self.class_ids)
        return ids[np.argmax(logits, axis=-1)]

    # -------------------------------------------------------- serialization

    def to_arrays(self):
        ids = np.array(self.class_ids, dtype=np.float64)
        counts = np.array([self.class_counts[int(k)] for k in ids], dtype=np.float64)
        return {"bank_ids": ids, "bank_counts": counts, "bank_protos": self.matrix()}

    @classmethod
    def from_arrays(cls, embed_dim, arrays):
        bank = cls(embed_dim)
        ids = arrays["bank_ids"].astype(int)
        protos = {int(k): arrays["bank_protos"][i] for i, k in enumerate(ids)}
        counts = {int(k): int(arrays["bank_counts"][i]) for i, k in enumerate(ids)}
        bank.extend(protos, counts)
        return bank
