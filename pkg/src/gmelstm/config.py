"""Run configuration: nested dataclasses loaded from JSON with strict key checking."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import MAX_LEN, MOSI_RATIOS, TASKS, canonical_modality
from .training import ADVANTAGE_MODES

RUN_ROOT_ENV = "GMELSTM_RUN_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dataset: str | None = None          # one JSONL, split by speaker
    train: str | None = None            # or explicit pre-split files
    val: str | None = None
    test: str | None = None
    synthetic: dict | None = None       # or a generated task (SyntheticSpec fields)
    synthetic_split: list[int] = field(default_factory=lambda: [160, 40, 50])
    split_ratios: list[float] = field(default_factory=lambda: list(MOSI_RATIOS))
    split_seed: int = 0
    k_acoustic: int | None = None
    k_visual: int | None = None
    normalize: bool = True
    max_len: int = MAX_LEN

    def validate(self):
        sources = [self.dataset is not None, self.train is not None, self.synthetic is not None]
        if sum(sources) != 1:
            raise ConfigError("data: set exactly one of 'dataset', 'train' (+val/test), 'synthetic'")
        if self.train is not None and (self.val is None or self.test is None):
            raise ConfigError("data: 'train' requires 'val' and 'test'")
        if self.synthetic is not None:
            task = self.synthetic.get("task", "keyword")
            if task not in TASKS:
                raise ConfigError(f"data.synthetic.task must be one of {TASKS}")
            if len(self.synthetic_split) != 3 or min(self.synthetic_split) < 1:
                raise ConfigError("data.synthetic_split needs three positive clip counts")
        if len(self.split_ratios) != 3 or min(self.split_ratios) <= 0:
            raise ConfigError("data.split_ratios needs three positive numbers")
        if self.max_len < 1:
            raise ConfigError("data.max_len must be positive")


@dataclass
class ModelConfig:
    hidden: int = 64
    head_units: int = 50
    d_proj: int | None = None

    def validate(self):
        if self.hidden < 1 or self.head_units < 1 or (self.d_proj is not None and self.d_proj < 1):
            raise ConfigError("model sizes must be positive")


@dataclass
class OptimizerConfig:
    lr: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    max_steps: int | None = None

    def validate(self):
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("optimizer: lr, batch_size, max_epochs, patience must be positive")


@dataclass
class ControllerConfig:
    lr: float = 1e-4
    n_samples: int = 5
    epoch_num: int = 20
    decay: float = 0.9
    advantage_mode: str = "ratio"
    hidden: int = 32
    gated: list[str] = field(default_factory=lambda: ["acoustic", "visual"])
    inner_max_epochs: int | None = None
    inner_patience: int | None = None

    def validate(self):
        if self.advantage_mode not in ADVANTAGE_MODES:
            raise ConfigError(f"controller.advantage_mode must be one of {ADVANTAGE_MODES}")
        if not 0.0 <= self.decay < 1.0:
            raise ConfigError("controller.decay must lie in [0, 1)")
        if self.lr <= 0 or self.n_samples < 1 or self.epoch_num < 1 or self.hidden < 1:
            raise ConfigError("controller: lr, n_samples, epoch_num, hidden must be positive")
        gated = [canonical_modality(m) for m in self.gated]
        if not gated or any(m == "language" for m in gated):
            raise ConfigError("controller.gated must list acoustic and/or visual only")
        self.gated = gated


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    seed: int = 0
    modalities: list[str] = field(default_factory=lambda: ["language", "acoustic", "visual"])
    methods: list[str] = field(default_factory=lambda: ["LSTM", "LSTM(A)", "GME-LSTM(A)"])
    subsets: list[str] = field(default_factory=lambda: ["text+audio+video"])
    run_dir: str | None = None

    def validate(self) -> "RunConfig":
        from .evaluation import METHODS, parse_subset

        for part in (self.data, self.model, self.optimizer, self.controller):
            part.validate()
        try:
            self.modalities = [canonical_modality(m) for m in self.modalities]
            for s in self.subsets:
                parse_subset(s)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; expected {METHODS}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def resolved_run_dir(self, name: str = "run") -> Path:
        if self.run_dir:
            return Path(self.run_dir)
        return Path(os.environ.get(RUN_ROOT_ENV, "runs")) / name


def _build(cls, obj: Any, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in obj.items():
        sub = {"data": DataConfig, "model": ModelConfig, "optimizer": OptimizerConfig,
               "controller": ControllerConfig}.get(key) if cls is RunConfig else None
        kwargs[key] = _build(sub, value, f"{where}.{key}") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(obj: dict) -> RunConfig:
    return _build(RunConfig, obj, "config").validate()


def load_config(path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    return config_from_dict(obj)


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Set dotted keys such as ``optimizer.lr``; unknown paths are rejected."""
    obj = cfg.to_dict()
    for dotted, value in overrides.items():
        node = obj
        *parents, leaf = dotted.split(".")
        for p in parents:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[leaf] = value
    return config_from_dict(obj)
