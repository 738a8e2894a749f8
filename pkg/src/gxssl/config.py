"""Experiment configuration: JSON blocks resolved onto typed defaults.

Defaults are the published hyperparameters (80 epochs, batch 256, lr 0.03,
momentum 0.9, weight decay 0.0004, tau 0.996, MLP 4096 -> 256, view 128,
sigma 0.5). Unknown keys and wrongly typed values are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .augment import AugmentConfig
from .core import ValidationError
from .evaluate import FinetuneConfig
from .patcher import TilingSpec
from .ssl import EncoderConfig, MlpConfig, SslHyperparams


class ConfigError(ValidationError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mlp: MlpConfig = field(default_factory=MlpConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    hyper: SslHyperparams = field(default_factory=SslHyperparams)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    tiling: TilingSpec = field(default_factory=TilingSpec)
    seed: int = 0
    sigma: float = 0.5

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


BLOCKS = {
    "encoder": EncoderConfig,
    "mlp": MlpConfig,
    "augment": AugmentConfig,
    "hyper": SslHyperparams,
    "finetune": FinetuneConfig,
    "tiling": TilingSpec,
}


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(key: str, value: Any, tp) -> Any:
    """Check ``value`` against annotation ``tp``; ints are accepted for floats."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(key, value, arg)
            except ConfigError as e:
                errors.append(str(e))
        raise ConfigError(f"{key}: expected {' or '.join(_type_name(a) for a in args)}, got {type(value).__name__}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {type(value).__name__}")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(f"{key}[{i}]", v, args[0]) for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(f"{key}[{i}]", v, a) for i, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {type(value).__name__}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected int, got {type(value).__name__}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected float, got {type(value).__name__}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected str, got {type(value).__name__}")
        return value
    return value


def _build_block(name: str, cls, raw: Any):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{name}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}")
        kwargs[key] = _coerce(f"{name}.{key}", value, hints[key])
    try:
        return cls(**kwargs)
    except ValidationError as e:
        raise ConfigError(f"{name}: {e}") from None


def resolve_config(raw: Mapping[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a JSON object")
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key in BLOCKS:
            kwargs[key] = _build_block(key, BLOCKS[key], value)
        elif key == "seed":
            kwargs[key] = _coerce(key, value, int)
        elif key == "sigma":
            kwargs[key] = _coerce(key, value, float)
            if not 0.0 <= kwargs[key] <= 1.0:
                raise ConfigError(f"sigma must lie in [0, 1], got {value}")
        else:
            raise ConfigError(f"unknown config key {key}")
    return ExperimentConfig(**kwargs)


def parse_config(path: str | os.PathLike | None) -> ExperimentConfig:
    """Read a JSON config file; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    return resolve_config(raw)


def synthetic_config(**overrides) -> ExperimentConfig:
    """Desk-scale settings for the synthetic cohort: small_conv, 64/32 tiling, 32-px views."""
    raw = {
        "encoder": {"kind": "small_conv"},
        "mlp": {"hidden_size": 1024, "output_size": 256},
        "augment": {"view_size": 32},
        "hyper": {"epochs": 30, "batch_size": 64},
        "tiling": {"patch_size": 64, "stride": 32},
    }
    for key, value in overrides.items():
        if isinstance(value, Mapping):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return resolve_config(raw)
