"""Experiment configuration: nested dataclasses loaded from JSON, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .datasets_features import GmmSpec
from .im_finetune import IMFinetuneConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class DenoiserConfig:
    hidden: int = 64
    n_freq: int = 8
    emb_dim: int = 8


@dataclass
class PretrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 3e-3


@dataclass
class FeatureConfig:
    hidden: int = 32
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-2


@dataclass
class SelectionConfig:
    G: int = 8
    ipc: int = 10
    K_i: int | None = 100
    alpha: float = 0.5
    beta: float = 0.5
    sample_steps: int = 50


@dataclass
class EvalConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    hidden: int = 32
    epochs: int = 100
    batch_size: int = 10
    lr: float = 1e-2


@dataclass
class ExperimentConfig:
    gmm: GmmSpec = field(default_factory=GmmSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: IMFinetuneConfig = field(default_factory=IMFinetuneConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    def validate(self) -> None:
        try:
            self.gmm.validate()
            self.finetune.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        s = self.selection
        if s.alpha <= 0 or s.beta <= 0:
            raise ConfigError("selection.alpha and selection.beta must be > 0")
        if s.ipc < 1 or s.G < 1:
            raise ConfigError("selection.ipc and selection.G must be >= 1")
        if s.K_i is not None and not 1 <= s.K_i <= self.gmm.n_train:
            raise ConfigError(f"selection.K_i must be in [1, {self.gmm.n_train}]")
        if self.schedule.T < 2 or not 0 < self.schedule.beta_start <= self.schedule.beta_end < 1:
            raise ConfigError("invalid schedule bounds")
        if not self.eval.seeds:
            raise ConfigError("eval.seeds must be nonempty")
        if self.pretrain.epochs < 1:
            raise ConfigError("pretrain.epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def fingerprint(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"selection.G": 4})``."""
        data = self.to_dict()
        for path, value in changes.items():
            node = data
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {path!r}")
            node[leaf] = value
        return config_from_dict(data)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}".lstrip(".")) if sub else value
    return cls(**kwargs)


_NESTED = {
    (ExperimentConfig, "gmm"): GmmSpec,
    (ExperimentConfig, "schedule"): ScheduleConfig,
    (ExperimentConfig, "denoiser"): DenoiserConfig,
    (ExperimentConfig, "pretrain"): PretrainConfig,
    (ExperimentConfig, "finetune"): IMFinetuneConfig,
    (ExperimentConfig, "features"): FeatureConfig,
    (ExperimentConfig, "selection"): SelectionConfig,
    (ExperimentConfig, "eval"): EvalConfig,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    return config_from_dict(json.loads(Path(path).read_text()))
