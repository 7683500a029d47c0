"""Small transformer encoder over image patches, with bottleneck adapters.

Pre-norm wiring per block::

    x = x + MHSA(LN(x))
    x = x + MLP(LN(x)) + s * ReLU(LN(x) @ W_down + b_down) @ W_up + b_up

The feature vector is the final-layer-norm output at the class-token
position.  All parameters live in a :class:`ParameterStore` with one group
tag each: ``backbone`` (frozen trunk), ``adapter`` (bottleneck branches),
``norm`` (every layer-norm gamma/beta), ``head`` (temporary classifier).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

GROUPS = ("backbone", "adapter", "norm", "head")

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AdapterConfig:
    hidden_dim: int = 8
    scale: float = 1.0
    learnable_scale: bool = False

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ValueError("adapter hidden_dim must be positive")
        if self.scale <= 0:
            raise ValueError("adapter scale must be positive")


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    ln_epsilon: float = 1e-6
    # stem normalization: pixels in [0,1] are mapped to (x - mean) * gain
    input_mean: float = 0.5
    input_gain: float = 2.0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.adapter.hidden_dim >= self.embed_dim:
            raise ValueError("adapter hidden_dim must be < embed_dim")

    @property
    def n_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_tokens(self):
        return self.n_patches + 1


class SchemaError(ValueError):
    pass


class ParameterStore:
    """Named tensors, each tagged with exactly one group."""

    def __init__(self):
        self._entries = {}  # name -> (Tensor, group)

    def add(self, name, data, group):
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r}")
        if name in self._entries:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self._entries[name] = (t, group)
        return t

    def __getitem__(self, name):
        return self._entries[name][0]

    def __contains__(self, name):
        return name in self._entries

    def names(self):
        return list(self._entries)

    def group_of(self, name):
        return self._entries[name][1]

    def tensors(self):
        return [t for t, _ in self._entries.values()]

    def by_group(self, group):
        if group not in GROUPS:
            raise ValueError(f"unknown group {group!r}")
        return [t for t, g in self._entries.values() if g == group]

    def select(self, mode):
        """Trainable set for test-time adaptation / training.

        ``norm``: every layer-norm gamma/beta.  ``adapter``: the bottleneck
        branches.  ``all``: backbone + adapter + norm (head excluded).
        ``head``: the classification head only.
        """
        if mode == "norm":
            return self.by_group("norm")
        if mode == "adapter":
            return self.by_group("adapter")
        if mode == "head":
            return self.by_group("head")
        if mode == "all":
            return [t for t, g in self._entries.values() if g != "head"]
        raise ValueError(f"unknown parameter mode {mode!r}")

    def drop_group(self, group):
        for name in [n for n, (_, g) in self._entries.items() if g == group]:
            del self._entries[name]

    def num_params(self, group=None):
        if group is None:
            return sum(t.size for t, _ in self._entries.values())
        return sum(t.size for t in self.by_group(group))

    def snapshot(self):
        return ModelCheckpoint(
            {n: (g, t.data.copy()) for n, (t, g) in self._entries.items()}
        )

    def restore(self, checkpoint):
        if set(checkpoint.entries) != set(self._entries):
            missing = set(checkpoint.entries) ^ set(self._entries)
            raise SchemaError(f"checkpoint schema mismatch: {sorted(missing)[:5]}")
        for name, (group, data) in checkpoint.entries.items():
            t, g = self._entries[name]
            if g != group or t.data.shape != data.shape:
                raise SchemaError(f"checkpoint schema mismatch at {name!r}")
            t.data = data.copy()


class ModelCheckpoint:
    """Immutable copy of every parameter with its group tag."""

    def __init__(self, entries):
        self.entries = {n: (g, np.array(d, dtype=np.float64)) for n, (g, d) in entries.items()}
        for _, d in self.entries.values():
            d.setflags(write=False)

    def __eq__(self, other):
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        if set(self.entries) != set(other.entries):
            return False
        return all(
            g == other.entries[n][0] and np.array_equal(d, other.entries[n][1])
            for n, (g, d) in self.entries.items()
        )


def save_checkpoint(path, checkpoint, extra_meta=None, extra_arrays=None):
    """Write a checkpoint container (npz: f64 arrays + json meta)."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "groups": {n: g for n, (g, _) in checkpoint.entries.items()},
        "extra": extra_meta or {},
    }
    arrays = {f"param/{n}": d for n, (_, d) in checkpoint.entries.items()}
    for key, arr in (extra_arrays or {}).items():
        arrays[f"extra/{key}"] = np.asarray(arr, dtype=np.float64)
    arrays["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path):
    """Read a checkpoint container; returns (checkpoint, extra_meta, extra_arrays)."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise SchemaError(f"unsupported checkpoint version {meta.get('version')}")
        entries = {}
        extra_arrays = {}
        for key in z.files:
            if key.startswith("param/"):
                name = key[len("param/"):]
                entries[name] = (meta["groups"][name], z[key])
            elif key.startswith("extra/"):
                extra_arrays[key[len("extra/"):]] = z[key]
    return ModelCheckpoint(entries), meta["extra"], extra_arrays


class Encoder:
    """Feature extractor; ``encode`` is a pure function of (image, params)."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.store = ParameterStore()
        self._build(rng)

    def _build(self, rng):
        cfg = self.config
        d = cfg.embed_dim
        patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
        hidden = int(round(cfg.mlp_ratio * d))
        r = cfg.adapter.hidden_dim

        def xavier(shape):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            return rng.uniform(-bound, bound, size=shape)

        # depth-scaled init on residual branch outputs keeps the stream
        # dominated by the patch embedding at initialization
        branch = 1.0 / np.sqrt(2.0 * cfg.depth)

        def xavier_out(shape):
            return branch * xavier(shape)

        add = self.store.add
        add("patch/proj_w", xavier((patch_dim, d)), "backbone")
        add("patch/proj_b", np.zeros(d), "backbone")
        add("patch/cls_token", rng.normal(0.0, 0.02, size=(1, 1, d)), "backbone")
        add("patch/pos_emb", rng.normal(0.0, 0.02, size=(1, cfg.n_tokens, d)), "backbone")
        for i in range(cfg.depth):
            p = f"block{i}"
            add(f"{p}/ln1_g", np.ones(d), "norm")
            add(f"{p}/ln1_b", np.zeros(d), "norm")
            for w in ("q", "k", "v"):
                add(f"{p}/attn_{w}_w", xavier((d, d)), "backbone")
                add(f"{p}/attn_{w}_b", np.zeros(d), "backbone")
            add(f"{p}/attn_o_w", xavier_out((d, d)), "backbone")
            add(f"{p}/attn_o_b", np.zeros(d), "backbone")
            add(f"{p}/ln2_g", np.ones(d), "norm")
            add(f"{p}/ln2_b", np.zeros(d), "norm")
            add(f"{p}/mlp_w1", xavier((d, hidden)), "backbone")
            add(f"{p}/mlp_b1", np.zeros(hidden), "backbone")
            add(f"{p}/mlp_w2", xavier_out((hidden, d)), "backbone")
            add(f"{p}/mlp_b2", np.zeros(d), "backbone")
            # zero-init up-projection: training starts at the frozen function
            add(f"{p}/adapter_down_w", rng.uniform(-1, 1, size=(d, r)) / np.sqrt(d), "adapter")
            add(f"{p}/adapter_down_b", np.zeros(r), "adapter")
            add(f"{p}/adapter_up_w", np.zeros((r, d)), "adapter")
            add(f"{p}/adapter_up_b", np.zeros(d), "adapter")
            if cfg.adapter.learnable_scale:
                add(f"{p}/adapter_scale", np.array(cfg.adapter.scale), "adapter")
        add("final/ln_g", np.ones(d), "norm")
        add("final/ln_b", np.zeros(d), "norm")

    # ------------------------------------------------------------- forward

    def patchify(self, images):
        """(B,H,W[,C]) images -> (B, n_patches, patch_dim) numpy array."""
        cfg = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 2:
            images = images[None]
        if images.ndim == 3:
            images = images[..., None]
        b, h, w, c = images.shape
        if (h, w, c) != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ag.ShapeError(
                f"image shape {(h, w, c)} does not match config "
                f"{(cfg.image_size, cfg.image_size, cfg.channels)}"
            )
        ps = cfg.patch_size
        grid = h // ps
        images = (images - cfg.input_mean) * cfg.input_gain
        x = images.reshape(b, grid, ps, grid, ps, c)
        x = x.transpose(0, 1, 3, 2, 4, 5).reshape(b, grid * grid, ps * ps * c)
        return x

    def patch_embed(self, images):
        """Project patches, prepend class token, add position embeddings."""
        s = self.store
        patches = Tensor(self.patchify(images))
        b = patches.shape[0]
        tok = ag.matmul(patches, s["patch/proj_w"]) + s["patch/proj_b"]
        # broadcast the class token over the batch before concatenation
        cls_b = s["patch/cls_token"] + Tensor(np.zeros((b, 1, self.config.embed_dim)))
        x = ag.concat([cls_b, tok], axis=1)
        return x + s["patch/pos_emb"]

    def _attention(self, x, prefix):
        cfg = self.config
        s = self.store
        b, n, d = x.shape
        nh = cfg.heads
        dh = d // nh

        def proj(name):
            h = ag.matmul(x, s[f"{prefix}/attn_{name}_w"]) + s[f"{prefix}/attn_{name}_b"]
            h = ag.reshape(h, (b, n, nh, dh))
            return ag.transpose(h, (0, 2, 1, 3))  # (b, nh, n, dh)

        q, k, v = proj("q"), proj("k"), proj("v")
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = ag.softmax(scores, axis=-1)
        out = ag.matmul(attn, v)
        out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (b, n, d))
        return ag.matmul(out, s[f"{prefix}/attn_o_w"]) + s[f"{prefix}/attn_o_b"]

    def adapt_mlp(self, h, prefix):
        """Frozen MLP branch plus the scaled bottleneck branch."""
        cfg = self.config
        s = self.store
        m = ag.gelu(ag.matmul(h, s[f"{prefix}/mlp_w1"]) + s[f"{prefix}/mlp_b1"])
        m = ag.matmul(m, s[f"{prefix}/mlp_w2"]) + s[f"{prefix}/mlp_b2"]
        a = ag.relu(ag.matmul(h, s[f"{prefix}/adapter_down_w"]) + s[f"{prefix}/adapter_down_b"])
        a = ag.matmul(a, s[f"{prefix}/adapter_up_w"]) + s[f"{prefix}/adapter_up_b"]
        if cfg.adapter.learnable_scale:
            a = ag.mul(a, s[f"{prefix}/adapter_scale"])
        else:
            a = ag.scale(a, cfg.adapter.scale)
        return m + a

    def block(self, x, i):
        s = self.store
        eps = self.config.ln_epsilon
        p = f"block{i}"
        h = ag.layer_norm(x, s[f"{p}/ln1_g"], s[f"{p}/ln1_b"], eps)
        x = x + self._attention(h, p)
        h = ag.layer_norm(x, s[f"{p}/ln2_g"], s[f"{p}/ln2_b"], eps)
        return x + self.adapt_mlp(h, p)

    def encode(self, images):
        """Images -> (B, embed_dim) class-token features."""
        x = self.patch_embed(images)
        for i in range(self.config.depth):
            x = self.block(x, i)
        x = ag.layer_norm(x, self.store["final/ln_g"], self.store["final/ln_b"],
                          self.config.ln_epsilon)
        return ag.take(x, 0, axis=1)

    def encode_np(self, images):
        """Inference-mode encode: plain ndarray out, nothing recorded."""
        return self.encode(images).data
