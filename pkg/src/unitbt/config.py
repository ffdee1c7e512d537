"""Pipeline configuration: one JSON document plus ``--key value`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import UnitBTError
from .worldgen import WorldSpec

GENERATION_METHODS = ("beam", "greedy", "topk", "sample")
SPEAKER_MODES = ("multi", "single")


class ConfigError(UnitBTError, ValueError):
    """Invalid configuration value or unknown key (a usage error)."""


@dataclass
class PipelineConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    n_train: int = 100
    n_test: int = 200
    n_mono: int = 2000
    K: int = 16
    feature_dim: int = 32
    kmeans_iters: int = 50
    rho: float = 0.75
    generation: str = "beam"
    beam: int = 8
    top_k: int = 10
    speaker_mode: str = "multi"
    diverse_seeds: list[int] = field(default_factory=lambda: [1, 2])
    length_penalty: float = 1.0
    # auxiliary models (target-to-unit, unit-to-target, duration predictor)
    model_dim: int = 64
    ff_dim: int = 128
    aux_dropout: float = 0.1
    label_smoothing: float = 0.1
    aux_epochs: int = 60
    aux_batch: int = 16
    aux_lr: float = 3e-3
    aux_warmup: int = 50
    unit_emb_dim: int = 32
    dp_hidden: int = 64
    # speech translation model
    st_dropout: float = 0.1
    st_pretrain_epochs: int = 15
    st_pretrain_batch: int = 32
    st_pretrain_lr: float = 2e-3
    st_pretrain_warmup: int = 100
    st_finetune_epochs: int = 30
    st_finetune_batch: int = 16
    st_finetune_lr: float = 2e-3
    st_finetune_warmup: int = 50
    average_last: int = 10
    eval_beam: int = 8
    seed: int = 0

    def validate(self) -> "PipelineConfig":
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if self.beam < 1 or self.eval_beam < 1:
            raise ConfigError("beam sizes must be >= 1")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.generation not in GENERATION_METHODS:
            raise ConfigError(f"generation must be one of {GENERATION_METHODS}")
        if self.speaker_mode not in SPEAKER_MODES:
            raise ConfigError(f"speaker_mode must be one of {SPEAKER_MODES}")
        if self.n_train < 1 or self.n_test < 1 or self.n_mono < 0:
            raise ConfigError("corpus sizes must be positive (n_mono may be 0)")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        for name in ("aux_dropout", "st_dropout", "label_smoothing"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        try:
            self.world.validate()
        except ValueError as exc:
            raise ConfigError(f"world: {exc}") from None
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PipelineConfig":
        cfg = cls()
        for key, value in data.items():
            set_value(cfg, key, value)
        return cfg


def _coerce(current: Any, value: Any, key: str) -> Any:
    if isinstance(value, str):
        try:
            if isinstance(current, bool):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "1")
            if isinstance(current, int):
                return int(value)
            if isinstance(current, float):
                return float(value)
            if isinstance(current, list):
                return [int(v) for v in value.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"cannot parse {value!r} for {key}") from None
        return value
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, list) and not isinstance(value, list):
        raise ConfigError(f"{key} expects a list")
    return value


def set_value(cfg: PipelineConfig, key: str, value: Any) -> None:
    """Set a (possibly dotted, e.g. ``world.seed``) key with type coercion."""
    key = key.replace("-", "_")
    target: Any = cfg
    parts = key.split(".")
    if parts == ["world"] and isinstance(value, dict):
        for k, v in value.items():
            set_value(cfg, f"world.{k}", v)
        return
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(target, part)
    last = parts[-1]
    if not dataclasses.is_dataclass(target) or last not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, last, _coerce(getattr(target, last), value, key))


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    cfg = PipelineConfig.from_dict(data)
    for k, v in (overrides or {}).items():
        set_value(cfg, k, v)
    return cfg.validate()
