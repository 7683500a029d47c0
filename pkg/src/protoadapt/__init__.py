"""Prototype-classifier continual learning with test-time adaptation.

Library layout:

- ``autograd``: dense f64 tensors, tape-based reverse-mode differentiation,
  SGD with momentum and cosine annealing.
- ``encoder``: small transformer encoder with bottleneck adapters, grouped
  parameter store, exact snapshot/restore and checkpoint files.
- ``prototypes``: per-class mean-embedding bank and dot-product softmax
  prediction.
- ``phase1``: supervised adapter training on the first task.
- ``tta``: per-batch test-time refinement by marginal-entropy minimization
  with model reset.
- ``data``: synthetic datasets, IDX ingestion, noise corruptions, task
  streams.
- ``protocol``: the incremental protocol, baselines and metrics.
- ``config`` / ``cli``: experiment configuration and orchestration.
"""

__version__ = "0.1.0"
