"""Run configuration: YAML parsing, schema validation, and presets.

Config files are hierarchical key/value YAML validated strictly against the
dataclass schema: unknown keys are rejected with their full field path, and
semantic checks run at construction time, before any compute starts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigError
from .network import NetworkConfig
from .training import TrainHyper

PRESET_NAMES = ("tiny", "full")


@dataclass
class DataConfig:
    train_dir: str = "data/train"
    val_dir: str | None = None  # falls back to train_dir


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/run"
    data: DataConfig = field(default_factory=DataConfig)
    model: NetworkConfig = field(default_factory=lambda: NetworkConfig(num_classes=8))
    train: TrainHyper = field(default_factory=TrainHyper)


_SECTIONS = {"data": DataConfig, "model": NetworkConfig, "train": TrainHyper}


def _coerce(value, default, path: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str) or default is None:
        if value is not None and not isinstance(value, (str, int, float)):
            raise ConfigError(f"{path}: expected a scalar, got {value!r}")
        return value if (value is None or isinstance(value, str)) else str(value)
    raise ConfigError(f"{path}: unsupported field type")


def _defaults_probe(dc_type):
    # NetworkConfig has one required field; everything else default-constructs
    if dc_type is NetworkConfig:
        return NetworkConfig(num_classes=8)
    return dc_type()


def _build_dataclass(dc_type, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {data!r}")
    fields = {f.name: f for f in dataclasses.fields(dc_type)}
    for key in data:
        if key not in fields:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {where!r}")
    defaults = _defaults_probe(dc_type)
    kwargs = {}
    for name, value in data.items():
        sub_path = f"{path}.{name}" if path else name
        if dc_type is RunConfig and name in _SECTIONS:
            kwargs[name] = _build_dataclass(_SECTIONS[name], value, sub_path)
        else:
            kwargs[name] = _coerce(value, getattr(defaults, name), sub_path)
    try:
        return dc_type(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def run_config_from_dict(data: dict) -> RunConfig:
    return _build_dataclass(RunConfig, data or {}, "")


def run_config_to_dict(cfg: RunConfig) -> dict:
    def clean(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: clean(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [clean(v) for v in obj]
        return obj

    return clean(cfg)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return run_config_from_dict(data)


def save_run_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(run_config_to_dict(cfg), fh, sort_keys=False)


def preset_path(name: str) -> Path:
    if name not in PRESET_NAMES:
        raise ConfigError(f"unknown preset {name!r}, expected one of {PRESET_NAMES}")
    return Path(str(resources.files("hybridseg").joinpath(f"presets/{name}.yaml")))


def resolve_config(spec: str) -> RunConfig:
    """Accept either a preset name or a path to a YAML file."""
    if spec in PRESET_NAMES:
        return load_run_config(preset_path(spec))
    return load_run_config(spec)
