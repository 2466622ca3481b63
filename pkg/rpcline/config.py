"""Configuration management for rpcline.

Handles locating and loading the experiment file (rpcline.json), rejecting
unknown keys and mistyped values, converting the document into frozen
dataclasses, and applying command-line overrides.
"""

import dataclasses
import json
from enum import Enum
from pathlib import Path
from typing import Any

from .models import CostModelError, ExperimentConfig, NicModel

CONFIG_FILENAME = "rpcline.json"


class ConfigError(Exception):
    """Raised when configuration is invalid or missing."""
    pass


def find_config(config_path: Path | None = None) -> Path | None:
    """Locate the experiment file.

    Searches in the following order:
    1. Explicit path if provided (must exist)
    2. ./rpcline.json (current directory)

    Returns:
        Path to the file, or None to run on built-in defaults

    Raises:
        ConfigError: If an explicit path does not exist
    """
    if config_path is not None:
        if not config_path.exists():
            raise ConfigError(f"config file not found at {config_path}")
        return config_path
    local_path = Path(CONFIG_FILENAME)
    return local_path if local_path.exists() else None


def read_document(path: Path) -> dict[str, Any]:
    """Parse a JSON config document.

    Raises:
        ConfigError: On unreadable files or invalid JSON (with line and column)
    """
    try:
        with open(path) as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in {path} at line {e.lineno}, column {e.colno}: {e.msg}")
    except OSError as e:
        raise ConfigError(f"Cannot read {path}: {e}")
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return document


def _convert(value: Any, default: Any, key: str) -> Any:
    """Coerce one JSON value to the type of the field's default."""
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected an object")
        return _build(type(default), value, key)
    if isinstance(default, Enum):
        try:
            return type(default)(value)
        except ValueError:
            choices = ", ".join(str(m.value) for m in type(default))
            raise ConfigError(f"{key}: {value!r} is not one of {choices}")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{key}: expected a list of strings")
        return tuple(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if isinstance(default, int) or default is None:
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string")
        return value
    raise ConfigError(f"{key}: unsupported setting")


def _build(cls: type, data: dict[str, Any], prefix: str = "") -> Any:
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown config key: {prefix + '.' if prefix else ''}{unknown[0]}")
    values = {}
    for name, value in data.items():
        key = f"{prefix}.{name}" if prefix else name
        values[name] = _convert(value, getattr(defaults, name), key)
    try:
        return dataclasses.replace(defaults, **values)
    except (CostModelError, ValueError) as e:
        raise ConfigError(f"{prefix or 'config'}: {e}")


def config_from_dict(document: dict[str, Any]) -> ExperimentConfig:
    """Validate a config document and build an ExperimentConfig.

    Raises:
        ConfigError: On unknown keys, wrong types or violated invariants
    """
    return _build(ExperimentConfig, document)


def config_to_dict(config: ExperimentConfig) -> dict[str, Any]:
    """Plain JSON-ready tree of every setting."""
    def plain(value: Any) -> Any:
        if dataclasses.is_dataclass(value):
            return {f.name: plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, Enum):
            return value.value
        if isinstance(value, tuple):
            return list(value)
        return value
    return plain(config)


def load_config(config_path: Path | None = None) -> ExperimentConfig:
    """Load the experiment config, falling back to built-in defaults.

    Args:
        config_path: Optional explicit path

    Raises:
        ConfigError: If the file is missing, malformed or invalid
    """
    found = find_config(config_path)
    if found is None:
        return ExperimentConfig()
    return config_from_dict(read_document(found))


def apply_overrides(
    config: ExperimentConfig,
    seed: int | None = None,
    model: str | None = None,
    out_dir: Path | None = None,
) -> ExperimentConfig:
    """Apply --seed, --model and --out on top of the loaded config.

    Raises:
        ConfigError: If the model name is unknown
    """
    changes: dict[str, Any] = {}
    if seed is not None:
        changes["seed"] = seed
    if model is not None:
        changes["model"] = _convert(model, NicModel.COHERENT, "model")
    if out_dir is not None:
        changes["output"] = dataclasses.replace(config.output, out_dir=str(out_dir))
    return dataclasses.replace(config, **changes)
