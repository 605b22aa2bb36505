"""Training configuration and its YAML file form.

The file mirrors ``TrainConfig``: top-level keys are its scalar fields plus
two nested sections, ``model`` (ModelConfig) and ``loss`` (LossWeights).
Unknown keys anywhere are a config error.

    seed: 0
    epochs: 200
    batch_size: 4
    lr: 0.0004
    model:
      c_t: 32
      mode: fused
    loss:
      depth: 2.0
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .losses import LossWeights
from .model import ModelConfig
from .tensor import ConfigError


@dataclass
class TrainConfig:
    lr: float = 4e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 4
    seed: int = 0
    corpus: str | None = None
    aux_tasks: bool = True
    # cap on training scenes used (None = whole split); handy for short runs
    max_train_scenes: int | None = None
    workers: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")


_NESTED = {"loss": LossWeights, "model": ModelConfig}


def _tupleize(x):
    return tuple(_tupleize(v) for v in x) if isinstance(x, (list, tuple)) else x


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if cls is TrainConfig and k in _NESTED:
            kwargs[k] = _build(_NESTED[k], v or {}, k)
        elif isinstance(v, list):
            kwargs[k] = _tupleize(v)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def from_dict(data):
    return _build(TrainConfig, data or {}, "")


def to_dict(cfg):
    def plain(x):
        if dataclasses.is_dataclass(x):
            return {f.name: plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
        if isinstance(x, tuple):
            return [plain(v) for v in x]
        return x

    return plain(cfg)


def load_config(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return from_dict(data)


def dump_config(cfg, path=None):
    text = yaml.safe_dump(to_dict(cfg), sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
