"""Experiment configuration: YAML in, validated dataclasses out.

A config file fully determines a run; unknown keys are rejected with
their path so typos fail fast.  Keys left out of the file fall back to
the library defaults: phase-1 trains 20 epochs at lr 0.01 with cosine
annealing; test-time adaptation uses batch size 16, 8 augmentations per
sample, one iteration, lr 0.01, no weight decay.

Method specs are strings: a method name optionally followed by
``?key=value`` overrides for the TTA section, e.g. ``tta?iterations=4``
or ``tta?reset_policy=none``.  Overrides form the ablation grids.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import yaml

from .data import CorruptionSpec, SynthSpec
from .encoder import AdapterConfig, EncoderConfig
from .phase1 import Phase1Config
from .protocol import METHODS
from .tta import AugmentationPolicy, TTAConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StreamSpec:
    increments: tuple = (2, 2, 2, 2, 2)
    order_seed: int = 0

    def __post_init__(self):
        if not self.increments or any(i < 1 for i in self.increments):
            raise ValueError("increments must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    phase1: Phase1Config = field(default_factory=Phase1Config)
    tta: TTAConfig = field(default_factory=TTAConfig)
    dataset: SynthSpec = field(default_factory=SynthSpec)
    stream: StreamSpec = field(default_factory=StreamSpec)
    corruption: CorruptionSpec | None = None
    methods: tuple = ("frozen", "first-session", "tta")
    seeds: tuple = (0, 1, 2)
    output: str = "results.jsonl"


_NESTED = {
    "encoder": EncoderConfig,
    "phase1": Phase1Config,
    "tta": TTAConfig,
    "dataset": SynthSpec,
    "stream": StreamSpec,
    "corruption": CorruptionSpec,
}
_INNER = {"adapter": AdapterConfig, "policy": AugmentationPolicy}


def _build(cls, mapping, path):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(mapping).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
        if key in _INNER and isinstance(value, dict):
            value = _build(_INNER[key], value, f"{path}.{key}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def parse_config_dict(raw, path="config"):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    known = {f.name for f in fields(ExperimentConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
        if key in _NESTED:
            if key == "corruption" and value is None:
                kwargs[key] = None
            else:
                kwargs[key] = _build(_NESTED[key], value, f"{path}.{key}")
        elif key in ("methods", "seeds"):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    cfg = ExperimentConfig(**kwargs)
    for m in cfg.methods:
        parse_method_spec(m, cfg.tta)  # validate early
    if not cfg.seeds:
        raise ConfigError(f"{path}.seeds: at least one seed required")
    return cfg


def parse_config(path):
    """Load and validate a YAML experiment config file."""
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    return parse_config_dict(raw, path=str(path))


def parse_method_spec(spec, base_tta):
    """``name?key=value&...`` -> (name, TTAConfig with overrides)."""
    name, _, query = spec.partition("?")
    if name not in METHODS:
        raise ConfigError(f"unknown method {name!r}; expected one of {METHODS}")
    overrides = {}
    if query:
        for item in query.split("&"):
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"method {spec!r}: bad override {item!r}")
            tta_fields = {f.name: f for f in fields(TTAConfig)}
            if key not in tta_fields:
                raise ConfigError(f"method {spec!r}: unknown tta key {key!r}")
            current = getattr(base_tta, key)
            if isinstance(current, bool):
                value = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
            overrides[key] = value
    base = asdict(base_tta)
    base.pop("policy")
    try:
        tta = TTAConfig(policy=base_tta.policy, **{**base, **overrides})
    except ValueError as e:
        raise ConfigError(f"method {spec!r}: {e}") from e
    return name, tta


def config_to_dict(cfg: ExperimentConfig):
    """Plain-dict echo of a config, embedded in every results record."""
    out = asdict(cfg)
    return out
