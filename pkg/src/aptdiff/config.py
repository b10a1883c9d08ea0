"""Run configuration and its YAML file format.

A config file has up to three top-level sections, each optional, whose keys
are exactly the fields of the matching dataclass::

    net:       # NetConfig
      image_size: 32
    pretrain:  # PretrainConfig
      steps: 3000
    apt:       # AptConfig
      lambda_dist: 30.0
      ata: true

Unknown keys are rejected so typos never silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from aptdiff.errors import LogParseError, RangeError
from aptdiff.tinynet import NetConfig

CONFIG_ENV = "APTDIFF_CONFIG"

# Ablation variants are cumulative: each adds one component to the previous one.
ABLATIONS = {
    "base": (False, False, False),
    "ata": (True, False, False),
    "rs": (True, True, False),
    "aa": (True, True, True),
}
ABLATION_LABELS = {"base": "Base", "ata": "+ATA", "rs": "+RS", "aa": "+AA (full APT)"}


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 2e-3
    corpus_size: int = 2048
    corpus_seed: int = 0
    cond_dropout: float = 0.1
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.corpus_size < 1:
            raise RangeError("pretrain steps >= 0, batch_size >= 1 and corpus_size >= 1 required")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise RangeError("cond_dropout must lie in [0, 1)")


@dataclass(frozen=True)
class AptConfig:
    lambda_dist: float = 30.0
    lambda_attn: float = 3e-4
    p_max: float = 0.8
    bins: int = 10
    ema_alpha: float = 0.1
    temperature_mode: str = "full"
    adapter_rank: int = 32
    # toy-scale learning rates, far above the SDXL values (5e-5 / 5e-6)
    lr_adapter: float = 1e-3
    lr_token: float = 1e-4
    weight_decay: float = 1e-2
    steps: int = 2000
    seed: int = 0
    ata: bool = True
    rs: bool = True
    aa: bool = True
    batch_size: int = 1
    identifier: str = "V*"
    class_word: str = "square"
    stat_reduction: str = "channel"
    scale_range: tuple[float, float] = (1.0, 3.0)
    rotation_range: tuple[float, float] = (-15.0, 15.0)
    aug_fill: float | str = "mean"
    checkpoint_every: int = 250
    loss_weight_fn: str = "constant"  # omega(t) of the plain denoising loss

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        object.__setattr__(self, "rotation_range", tuple(float(v) for v in self.rotation_range))
        if self.lambda_dist < 0 or self.lambda_attn < 0:
            raise RangeError("regularizer weights must be >= 0")
        if not 0.0 <= self.p_max <= 1.0:
            raise RangeError("p_max must lie in [0, 1]")
        if self.bins < 1:
            raise RangeError("bins must be >= 1")
        if not 0.0 < self.ema_alpha <= 1.0:
            raise RangeError("ema_alpha must lie in (0, 1]")
        if self.temperature_mode not in ("full", "tenth"):
            raise RangeError("temperature_mode must be 'full' or 'tenth'")
        if self.adapter_rank < 0 or self.steps < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise RangeError("adapter_rank >= 0, steps >= 0, batch_size >= 1, checkpoint_every >= 1 required")
        if self.stat_reduction not in ("channel", "global"):
            raise RangeError("stat_reduction must be 'channel' or 'global'")
        if self.loss_weight_fn != "constant":
            raise RangeError("only the constant omega(t) = 1 weighting is implemented")

    @property
    def ablation(self) -> str:
        for name, flags in ABLATIONS.items():
            if flags == (self.ata, self.rs, self.aa):
                return name
        return "custom"

    def with_ablation(self, name: str) -> "AptConfig":
        ata, rs, aa = ABLATIONS[name]
        return replace(self, ata=ata, rs=rs, aa=aa)


@dataclass(frozen=True)
class ExperimentConfig:
    net: NetConfig = field(default_factory=NetConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    apt: AptConfig = field(default_factory=AptConfig)

    def __post_init__(self):
        if self.pretrain.T % self.apt.bins:
            raise RangeError(f"bins={self.apt.bins} must divide T={self.pretrain.T}")
        if self.net.num_timesteps != self.pretrain.T:
            raise RangeError("net.num_timesteps must equal pretrain.T")

    def to_dict(self) -> dict:
        return {"net": self.net.to_dict(), "pretrain": asdict(self.pretrain), "apt": _plain(asdict(self.apt))}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:10]


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _build(cls, data: dict | None, section: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise RangeError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    return cls(**data)


def from_dict(d: dict | None) -> ExperimentConfig:
    d = dict(d or {})
    unknown = set(d) - {"net", "pretrain", "apt"}
    if unknown:
        raise RangeError(f"unknown config section(s): {sorted(unknown)}")
    return ExperimentConfig(
        net=_build(NetConfig, d.get("net"), "net"),
        pretrain=_build(PretrainConfig, d.get("pretrain"), "pretrain"),
        apt=_build(AptConfig, d.get("apt"), "apt"),
    )


def load_config(path=None) -> ExperimentConfig:
    """Read ``path``, else ``$APTDIFF_CONFIG``, else defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return ExperimentConfig()
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise LogParseError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise LogParseError(f"{path}: top level must be a mapping")
    return from_dict(data)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def override(cfg: ExperimentConfig, section: str, **changes) -> ExperimentConfig:
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    d = cfg.to_dict()
    d[section].update(changes)
    return from_dict(d)
