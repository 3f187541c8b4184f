"""Parsing and validation of the JSON experiment configuration.

Documented keys (see README for the full reference):
  model      object: kind plus architecture sizes
  dataset    object: kind plus generator or file settings
  n          worker count N
  p          replication count P (each unit lives on exactly P workers)
  strategy   "neuron" or "block"
  schedule   object: kind, lr_max, lr_min, warmup_fraction, milestones
  optimizer  object: kind ("sgd-nesterov" or "adam"), momentum
  batch_per_worker, e_full, seed, threads
  alignment_every, alignment_layers, max_steps (0 disables each)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .models import build_mini_resnet, build_residual_mlp
from .optim import ScheduleSpec
from .topology import GlobalModel


def _take(raw: dict, allowed: dict, where: str) -> dict:
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {sorted(unknown)}")
    merged = dict(allowed)
    merged.update(raw)
    return merged


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "mini_resnet"
    channels: int = 26
    width: int = 64
    blocks: int = 8
    classes: int = 10
    norm_groups: int = 2
    in_channels: int = 3
    in_dim: int = 16
    image_hw: tuple[int, int] = (8, 8)

    @staticmethod
    def from_dict(raw: dict) -> "ModelConfig":
        defaults = {f: getattr(ModelConfig, f) for f in (
            "kind", "channels", "width", "blocks", "classes",
            "norm_groups", "in_channels", "in_dim", "image_hw")}
        merged = _take(raw, defaults, "model")
        merged["image_hw"] = tuple(merged["image_hw"])
        cfg = ModelConfig(**merged)
        if cfg.kind not in ("mini_resnet", "residual_mlp"):
            raise ConfigError(f"model.kind must be mini_resnet or residual_mlp, got {cfg.kind!r}")
        return cfg

    def build(self, seed: int) -> GlobalModel:
        if self.kind == "mini_resnet":
            return build_mini_resnet(self.channels, self.blocks, self.classes,
                                     self.norm_groups, self.in_channels, self.image_hw, seed)
        return build_residual_mlp(self.width, self.blocks, self.classes, self.in_dim, seed)


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic-blobs"
    path: str | None = None
    test_fraction: float = 0.2
    train_size: int = 5000
    test_size: int = 1000
    classes: int = 10
    channels: int = 3
    height: int = 8
    width: int = 8
    noise: float = 1.5
    seed: int = 7
    flatten: bool = False

    @staticmethod
    def from_dict(raw: dict) -> "DatasetConfig":
        defaults = {f: getattr(DatasetConfig, f) for f in (
            "kind", "path", "test_fraction", "train_size", "test_size", "classes",
            "channels", "height", "width", "noise", "seed", "flatten")}
        return DatasetConfig(**_take(raw, defaults, "dataset"))


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd-nesterov"
    momentum: float = 0.9

    @staticmethod
    def from_dict(raw: dict) -> "OptimizerConfig":
        defaults = {"kind": OptimizerConfig.kind, "momentum": OptimizerConfig.momentum}
        return OptimizerConfig(**_take(raw, defaults, "optimizer"))


def _schedule_from_dict(raw: dict) -> ScheduleSpec:
    defaults = {
        "kind": "cosine",
        "lr_max": 0.2,
        "lr_min": 0.002,
        "warmup_fraction": None,
        "milestones": (0.5, 0.75),
        "decay": 0.1,
    }
    merged = _take(raw, defaults, "schedule")
    if merged["warmup_fraction"] is None:
        merged["warmup_fraction"] = 0.05 if merged["kind"] == "cosine" else 0.0
    merged["milestones"] = tuple(merged["milestones"]) if merged["kind"] == "multistep" else ()
    return ScheduleSpec(**merged)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    n: int = 8
    p: int = 8
    strategy: str = "block"
    schedule: ScheduleSpec = field(default_factory=lambda: ScheduleSpec(
        "cosine", lr_max=0.2, lr_min=0.002, warmup_fraction=0.05))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_per_worker: int = 8
    e_full: int = 4
    seed: int = 1
    threads: int = 1
    alignment_every: int = 0
    alignment_layers: tuple[str, ...] = ()
    max_steps: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"config field 'n' must be positive, got {self.n}")
        if not 1 <= self.p <= self.n:
            raise ConfigError(f"config field 'p' must satisfy 1 <= p <= n, got p={self.p}, n={self.n}")
        if self.strategy not in ("neuron", "block"):
            raise ConfigError(f"config field 'strategy' must be neuron or block, got {self.strategy!r}")
        if self.batch_per_worker < 1:
            raise ConfigError(f"config field 'batch_per_worker' must be positive, got {self.batch_per_worker}")
        if self.e_full < 0:
            raise ConfigError(f"config field 'e_full' must be non-negative, got {self.e_full}")
        if self.threads < 1:
            raise ConfigError(f"config field 'threads' must be positive, got {self.threads}")
        if self.alignment_every < 0 or self.max_steps < 0:
            raise ConfigError("config fields 'alignment_every' and 'max_steps' must be non-negative")

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        allowed = {
            "model": {}, "dataset": {}, "schedule": {}, "optimizer": {},
            "n": 8, "p": 8, "strategy": "block", "batch_per_worker": 8,
            "e_full": 4, "seed": 1, "threads": 1, "alignment_every": 0,
            "alignment_layers": (), "max_steps": 0,
        }
        merged = _take(raw, allowed, "config")
        return ExperimentConfig(
            model=ModelConfig.from_dict(merged["model"]),
            dataset=DatasetConfig.from_dict(merged["dataset"]),
            schedule=_schedule_from_dict(merged["schedule"]),
            optimizer=OptimizerConfig.from_dict(merged["optimizer"]),
            n=merged["n"],
            p=merged["p"],
            strategy=merged["strategy"],
            batch_per_worker=merged["batch_per_worker"],
            e_full=merged["e_full"],
            seed=merged["seed"],
            threads=merged["threads"],
            alignment_every=merged["alignment_every"],
            alignment_layers=tuple(merged["alignment_layers"]),
            max_steps=merged["max_steps"],
        )

    def to_dict(self) -> dict:
        return {
            "model": {
                "kind": self.model.kind, "channels": self.model.channels,
                "width": self.model.width, "blocks": self.model.blocks,
                "classes": self.model.classes, "norm_groups": self.model.norm_groups,
                "in_channels": self.model.in_channels, "in_dim": self.model.in_dim,
                "image_hw": list(self.model.image_hw),
            },
            "dataset": {
                "kind": self.dataset.kind, "path": self.dataset.path,
                "test_fraction": self.dataset.test_fraction,
                "train_size": self.dataset.train_size, "test_size": self.dataset.test_size,
                "classes": self.dataset.classes, "channels": self.dataset.channels,
                "height": self.dataset.height, "width": self.dataset.width,
                "noise": self.dataset.noise, "seed": self.dataset.seed,
                "flatten": self.dataset.flatten,
            },
            "schedule": {
                "kind": self.schedule.kind, "lr_max": self.schedule.lr_max,
                "lr_min": self.schedule.lr_min,
                "warmup_fraction": self.schedule.warmup_fraction,
                "milestones": list(self.schedule.milestones), "decay": self.schedule.decay,
            },
            "optimizer": {"kind": self.optimizer.kind, "momentum": self.optimizer.momentum},
            "n": self.n, "p": self.p, "strategy": self.strategy,
            "batch_per_worker": self.batch_per_worker, "e_full": self.e_full,
            "seed": self.seed, "threads": self.threads,
            "alignment_every": self.alignment_every,
            "alignment_layers": list(self.alignment_layers),
            "max_steps": self.max_steps,
        }

    def replace(self, **updates) -> "ExperimentConfig":
        doc = self.to_dict()
        for key, value in updates.items():
            if key not in doc:
                raise ConfigError(f"unknown config field {key!r}")
            if isinstance(doc[key], dict) and isinstance(value, dict):
                doc[key].update(value)
            else:
                doc[key] = value
        return ExperimentConfig.from_dict(doc)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)
