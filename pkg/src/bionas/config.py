"""Flat TOML configuration: presets, user files and resolved-config provenance."""
from __future__ import annotations

import math
from dataclasses import fields
from pathlib import Path

import tomli

from .trainer import TrainConfig

PRESET_DIR = Path(__file__).with_name("presets")
PRESETS = ("cifar-eval", "supernet-search", "im16", "desk-eval", "desk-search")


class ConfigError(ValueError):
    """Invalid configuration (CLI exit code 2)."""


def read_flat_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: tables are not supported ({nested})")
    return data


def load_preset(name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return train_config_from_dict(read_flat_toml(PRESET_DIR / f"{name}.toml"))


def train_config_from_dict(d: dict, base: TrainConfig | None = None) -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown training config keys {unknown}")
    try:
        return (base or TrainConfig()).updated(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return repr(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def write_flat_toml(path, d: dict) -> None:
    """Write scalars and lists; None values are omitted so that defaults apply on reload."""
    lines = [f"{k} = {_toml_value(v)}" for k, v in d.items() if v is not None]
    Path(path).write_text("\n".join(lines) + "\n")
