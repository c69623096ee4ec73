"""Strict YAML config loading for experiments.

One human-editable document covers every module's config block.  Loading is
strict: unknown keys anywhere in the tree are rejected with their full path,
because a silently ignored typo ("explore_fractoin: 0.5") is the classic way
an A/B harness lies to its operator.  The effective config — defaults
applied — can be dumped back out, and re-running from that echo reproduces
the original report byte for byte.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import yaml

from .bidder import PoolConfig
from .controller import ControllerConfig
from .experiment import ExperimentConfig
from .features import FeatureConfig
from .market import DriftEvent, MarketConfig
from .model import ModelConfig


class ConfigError(ValueError):
    """Malformed experiment config: bad structure, unknown key, or bad value."""


def _require_mapping(data, path: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"'{path}' must be a mapping, got {type(data).__name__}")
    return data


def _check_keys(data: dict, allowed, path: str) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        keys = ", ".join(f"'{path}.{key}'" if path else f"'{key}'" for key in unknown)
        raise ConfigError(f"unknown config key(s): {keys}")


def _build(cls, data: dict, path: str, special: dict | None = None):
    """Instantiate a flat config dataclass from a mapping, strictly."""
    special = special or {}
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(data, names, path)
    kwargs = {}
    for name, value in data.items():
        if name in special:
            value = special[name](value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value under '{path}': {exc}") from exc


def _build_drift(value) -> tuple[DriftEvent, ...]:
    if not isinstance(value, list):
        raise ConfigError("'market.drift' must be a list of {tick, add, retire} maps")
    events = []
    for i, item in enumerate(value):
        item = _require_mapping(item, f"market.drift[{i}]")
        _check_keys(
            item, ("tick", "add", "retire", "level_shift"), f"market.drift[{i}]"
        )
        try:
            events.append(DriftEvent(**item))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value under 'market.drift[{i}]': {exc}") from exc
    return tuple(events)


_BLOCKS = {
    "market": (MarketConfig, {"drift": _build_drift}),
    "features": (FeatureConfig, {}),
    "model": (
        ModelConfig,
        {
            "hidden_units": lambda v: tuple(v),
            "field_init_scales": lambda v: None if v is None else tuple(v),
        },
    ),
    "controller": (ControllerConfig, {}),
    "pool": (PoolConfig, {}),
}

_SCALARS = (
    "seed",
    "n_warmup_requests",
    "n_online_requests",
    "n_holdout_requests",
    "ads_per_request",
    "mc_samples",
    "warmup_explore_fraction",
)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = _require_mapping(data, "top level")
    _check_keys(data, _SCALARS + tuple(_BLOCKS), "")
    kwargs: dict = {}
    for name in _SCALARS:
        if name in data:
            kwargs[name] = data[name]
    for name, (cls, special) in _BLOCKS.items():
        if name in data:
            kwargs[name] = _build(cls, _require_mapping(data[name], name), name, special)
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad experiment config: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file '{path}': {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file '{path}' is not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    return config_from_dict(_require_mapping(data, str(path)))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Effective config as plain YAML-friendly types, defaults included."""
    return {
        "seed": cfg.seed,
        "n_warmup_requests": cfg.n_warmup_requests,
        "n_online_requests": cfg.n_online_requests,
        "n_holdout_requests": cfg.n_holdout_requests,
        "ads_per_request": cfg.ads_per_request,
        "mc_samples": cfg.mc_samples,
        "warmup_explore_fraction": cfg.warmup_explore_fraction,
        "market": {
            **{
                f.name: getattr(cfg.market, f.name)
                for f in dataclasses.fields(MarketConfig)
                if f.name != "drift"
            },
            "drift": [
                {
                    "tick": ev.tick,
                    "add": ev.add,
                    "retire": ev.retire,
                    "level_shift": ev.level_shift,
                }
                for ev in cfg.market.drift
            ],
        },
        "features": dataclasses.asdict(cfg.features),
        "model": {
            **dataclasses.asdict(cfg.model),
            "hidden_units": list(cfg.model.hidden_units),
            "field_init_scales": None
            if cfg.model.field_init_scales is None
            else list(cfg.model.field_init_scales),
        },
        "controller": dataclasses.asdict(cfg.controller),
        "pool": dataclasses.asdict(cfg.pool),
    }


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
