"""Training configuration documents (JSON or YAML)."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any

import yaml

from .losses import LossConfig
from .sinkhorn import SolverConfig
from .trainer.data import SyntheticDatasetSpec
from .trainer.train import TrainConfig

CONFIG_FILENAME = "config.yaml"


class ConfigFormatError(ValueError):
    """Raised when a config file is not valid JSON or YAML."""


NESTED_SECTIONS = {
    "solver": SolverConfig,
    "loss": LossConfig,
    "data": SyntheticDatasetSpec,
}


def _coerce(value: Any, default: Any, key: str) -> Any:
    """Cast a document value to the type of the field default (YAML reads 5e-5 as a string)."""
    try:
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, int) and not isinstance(value, bool):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            return str(value)
        if isinstance(default, tuple):
            if isinstance(value, int):
                return value
            return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    except (TypeError, ValueError):
        raise ValueError(f"Config key {key!r} has invalid value {value!r}") from None
    return value


def _build(cls, document: dict[str, Any], prefix: str = "", base=None):
    if not isinstance(document, dict):
        raise ValueError(f"Config section {prefix or '<root>'!r} must be a mapping")
    instance = base if base is not None else cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(document) - known)
    if unknown:
        raise ValueError(f"Unknown config keys: {', '.join(prefix + k for k in unknown)}")
    values = {}
    for key, value in document.items():
        if cls is TrainConfig and key in NESTED_SECTIONS:
            values[key] = _build(
                NESTED_SECTIONS[key], value or {}, prefix=f"{key}.", base=getattr(instance, key)
            )
        else:
            values[key] = _coerce(value, getattr(instance, key), prefix + key)
    return dataclasses.replace(instance, **values)


def config_from_dict(document: dict[str, Any] | None) -> TrainConfig:
    """Build a TrainConfig from a parsed document; absent keys keep their defaults."""
    return _build(TrainConfig, document or {})


def load_config_file(path: str | Path) -> dict[str, Any]:
    """
    Parse a config document.

    Returns:
        The parsed mapping (empty when the file is empty).

    Raises:
        OSError: If the file cannot be read.
        ConfigFormatError: If the file is not valid JSON/YAML.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text) if text.strip() else {}
        return yaml.safe_load(text) or {}
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigFormatError(f"Cannot parse config {path}: {exc}") from None


def load_config(path: str | Path) -> TrainConfig:
    return config_from_dict(load_config_file(path))


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(cfg: TrainConfig) -> dict[str, Any]:
    """Fully resolved config with every default filled in."""
    return _plain(dataclasses.asdict(cfg))


def save_config(cfg: TrainConfig, out_dir: str | Path) -> Path:
    """Write the resolved config as config.yaml into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / CONFIG_FILENAME
    with open(path, "w", encoding="utf-8") as f:
        yaml.dump(config_to_dict(cfg), f, default_flow_style=False, sort_keys=False)
    return path
