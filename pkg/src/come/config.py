"""Run configuration: nested dataclasses loaded from YAML plus ``key=value``
overrides. See ``configs/default.yaml`` for the annotated schema."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .ensemble import DistillConfig, FusionConfig
from .losses import BclConfig

METHODS = ("come", "ce-baseline", "oversample-baseline", "supcon-baseline")
SEED_ENV = "COME_SEED"


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    z_dim: int = 64
    layers: int = 2


@dataclass(frozen=True)
class AugmentConfig:
    pairs: tuple = ()
    ratio: float = 0.2


@dataclass(frozen=True)
class DataConfig:
    source: str = "motif"
    path: str = ""
    classes: int = 5
    per_class: int = 60
    noise: float = 0.1
    background: int = 3
    motifs: int = 6
    imbalance: float = 20.0
    val_per_class: int = 10
    test_per_class: int = 20
    shuffle_classes: bool = True
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    method: str = "come"
    K: int = 3
    batch_size: int = 32
    lr: float = 1e-4
    epochs: int = 100
    patience: int = 20
    seed: int = 0
    m_hard: int = 2
    hcm: bool = True
    bpp: bool = True
    contrastive: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    bcl: BclConfig = field(default_factory=BclConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.K < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("K, batch_size and lr must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_NESTED = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_SECTIONS = {"model": ModelConfig, "bcl": BclConfig, "fusion": FusionConfig,
             "distill": DistillConfig, "augment": AugmentConfig, "data": DataConfig}


def _build(cls, values: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(names)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    out = {}
    for k, v in values.items():
        if k == "pairs":
            v = tuple(tuple(p) for p in v)
        out[k] = v
    return cls(**out)


def from_dict(values: dict) -> TrainConfig:
    values = dict(values or {})
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in values:
            kwargs[name] = _build(cls, values.pop(name) or {})
    unknown = set(values) - set(_NESTED)
    if unknown:
        raise KeyError(f"unknown config keys: {sorted(unknown)}")
    kwargs.update(values)
    return TrainConfig(**kwargs)


def _coerce(text: str):
    return yaml.safe_load(text)


def apply_overrides(config: TrainConfig, overrides) -> TrainConfig:
    """Apply ``section.key=value`` or ``key=value`` strings (values parsed as YAML)."""
    d = config.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        target = d
        for p in parts[:-1]:
            if p not in target or not isinstance(target[p], dict):
                raise KeyError(f"unknown config section {p!r}")
            target = target[p]
        if parts[-1] not in target:
            raise KeyError(f"unknown config key {key!r}")
        target[parts[-1]] = _coerce(raw)
    return from_dict(d)


def load_config(path=None, overrides=None) -> TrainConfig:
    """Defaults, then the YAML file, then overrides, then ``$COME_SEED``."""
    values = {}
    if path is not None:
        values = yaml.safe_load(Path(path).read_text()) or {}
    config = apply_overrides(from_dict(values), overrides)
    if os.environ.get(SEED_ENV):
        seed = int(os.environ[SEED_ENV])
        config = config.replace(seed=seed, data=dataclasses.replace(config.data, seed=seed))
    return config


def dump_config(config: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


def effective(config: TrainConfig) -> TrainConfig:
    """Resolve ``method`` into concrete component switches."""
    if config.method == "come":
        return config
    base = config.replace(K=1, bpp=False, hcm=False,
                          fusion=dataclasses.replace(config.fusion, gating=False),
                          distill=dataclasses.replace(config.distill, enabled=False))
    if config.method == "supcon-baseline":
        return base.replace(contrastive=True,
                            bcl=dataclasses.replace(config.bcl, mode="supervised"))
    return base.replace(contrastive=False)
