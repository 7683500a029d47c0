"""Dense f64 tensors with tape-based reverse-mode automatic differentiation.

Everything is 64-bit: the models are tiny and the gradient checks demand
the precision.  Ops executed while a :class:`Tape` is active record nodes
on it in creation order, which is a topological order by construction;
``Tape.backward`` walks the nodes once in reverse.  Ops executed with no
active tape just compute their forward value (inference mode).

Broadcasting is supported for elementwise ops via numpy rules; gradients
are summed back over broadcast axes.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

LOG_FLOOR = 1e-12

_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A dense row-major float64 array, optionally a trainable leaf."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, _checked=False):
        arr = np.asarray(data, dtype=np.float64)
        if not _checked and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or '<anon>'}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; free functions below do the work
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class _Node:
    out: Tensor
    parents: tuple
    backward_fn: object  # grad_out -> tuple of parent grads (ndarray or None)


class Tape:
    """Ordered record of primitive ops; context manager activates it."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, *exc):
        _tls.tape = None
        return False

    def backward(self, loss, params=()):
        """Reverse-mode gradients of a scalar ``loss`` through the tape.

        Returns a dict mapping every reached requires_grad leaf (plus all
        tensors in ``params``, with zeros if unreached) to its gradient
        ndarray.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        out = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
                if p.requires_grad:
                    out[p] = grads[id(p)]
        for p in params:
            out.setdefault(p, np.zeros_like(p.data))
        return out

    def clear(self):
        self.nodes.clear()


def _record(out, parents, backward_fn):
    tape = _active_tape()
    if tape is not None:
        tape.nodes.append(_Node(out, tuple(parents), backward_fn))
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data, _checked=True)
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data - b.data, _checked=True)
    except ValueError as e:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from e
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data, _checked=True)
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    if not math.isfinite(c):
        raise NonFiniteError("scale by non-finite constant")
    out = Tensor(a.data * c, _checked=True)
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a, b):
    """Matrix product with leading batch dimensions (numpy ``@`` rules)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, _checked=True)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def relu(a):
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), _checked=True)
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


def gelu(a):
    """Exact (erf) GELU."""
    a = _as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out = Tensor(x * phi, _checked=True)
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _record(out, (a,), lambda g: (g * (phi + x * pdf),))


def softmax(a, axis=-1):
    """Max-subtracted softmax along ``axis``."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, _checked=True)

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return _record(out, (a,), backward)


def log(a, floor=LOG_FLOOR):
    """Natural log with the argument floored at ``floor``."""
    a = _as_tensor(a)
    clipped = np.maximum(a.data, floor)
    out = Tensor(np.log(clipped), _checked=True)
    mask = a.data >= floor
    return _record(out, (a,), lambda g: (g * mask / clipped,))


def mean(a, axis=None):
    a = _as_tensor(a)
    out = Tensor(a.data.mean(axis=axis), _checked=True)
    n = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full_like(a.data, float(np.asarray(g).reshape(())) / n),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _record(out, (a,), backward)


def tsum(a, axis=None):
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis), _checked=True)

    def backward(g):
        if axis is None:
            return (np.full_like(a.data, float(np.asarray(g).reshape(()))),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record(out, (a,), backward)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the last axis (population variance), then scale/shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({d},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data, _checked=True)

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        g_gamma = (g * xhat).sum(axis=lead)
        g_beta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gamma, g_beta

    return _record(out, (x, gamma, beta), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape), _checked=True)
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes):
    a = _as_tensor(a)
    out = Tensor(a.data.transpose(axes), _checked=True)
    inv = np.argsort(axes)
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _checked=True)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), backward)


def take(a, index, axis):
    """Select one index along ``axis`` (e.g. the class-token position)."""
    a = _as_tensor(a)
    out = Tensor(np.take(a.data, index, axis=axis), _checked=True)

    def backward(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _record(out, (a,), backward)


# ------------------------------------------------------------------ optimizer


def cosine_lr(base_lr, step_index, total_steps):
    """Cosine annealing from ``base_lr`` to 0 over ``total_steps``."""
    t = min(max(step_index, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass
class OptimizerState:
    """SGD-with-momentum state; ``total_steps=None`` means constant lr."""

    base_lr: float
    momentum: float = 0.9
    total_steps: int | None = None
    velocity: dict = field(default_factory=dict)

    def lr_at(self, step_index):
        if self.total_steps is None:
            return self.base_lr
        return cosine_lr(self.base_lr, step_index, self.total_steps)


def sgd_step(params, grads, state, step_index):
    """In-place ``v <- m v + g``; ``p <- p - lr v`` for every param."""
    lr = state.lr_at(step_index)
    for p in params:
        g = grads[p] if p in grads else grads[id(p)]
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape}")
        v = state.velocity.get(id(p))
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ShapeError(f"velocity shape {v.shape} != param shape {p.data.shape}")
        v = state.momentum * v + g
        state.velocity[id(p)] = v
        p.data = p.data - lr * v
    return state


def finite_diff_gradient(eval_fn, params, epsilon=1e-5):
    """Central-difference gradient of ``eval_fn()`` w.r.t. each param entry.

    ``eval_fn`` must read the live ``.data`` of the given params.  This is
    the independent oracle the autodiff tests check against.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    out = {}
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = eval_fn()
            flat[i] = orig - epsilon
            lo = eval_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * epsilon)
        out[p] = g
    return out
