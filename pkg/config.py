"""
Run configuration: dataclass defaults, then COAM_SEED from the environment
(or a .env file), then a YAML run file, then command-line overrides.

A run file has one mapping per section plus a few top-level keys:

    seed: 0
    grid_size: 128
    top_k: 2000
    refine: false
    use_distinctiveness: true
    network:  {image_size: 64, descriptor_dim: 64, ...}   # NetworkConfig
    train:    {learning_rate: 0.0001, batch_size: 16, ...} # TrainConfig
    ransac:   {iterations: 2000, inlier_threshold: 0.001}  # RansacConfig
    paths:    {data_dir: data, checkpoint: ..., output_dir: output, log_file: coam.log}
"""

import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Mapping, Optional

import yaml
from dotenv import load_dotenv

from coam_net import NetworkConfig
from geometry import RansacConfig
from training import TrainConfig

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "COAM_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data_dir: str = "data"
    checkpoint: str = os.path.join("checkpoints", "coam.ckpt")
    output_dir: str = "output"
    log_file: str = "coam.log"

    @property
    def log_path(self) -> str:
        if os.path.isabs(self.log_file):
            return self.log_file
        return os.path.join(self.output_dir, self.log_file)


SECTIONS = {
    "network": NetworkConfig,
    "train": TrainConfig,
    "ransac": RansacConfig,
    "paths": PathsConfig,
}
# Section fields that follow the global seed unless set explicitly.
SEEDED_FIELDS = {"network": "seed", "train": "seed", "ransac": "rng_seed"}


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    grid_size: int = 128
    top_k: int = 2000
    refine: bool = False
    use_distinctiveness: bool = True

    def __post_init__(self):
        if self.grid_size < 2:
            raise ValueError(f"grid_size must be >= 2, got {self.grid_size}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")


TOP_LEVEL = {f.name: f.default for f in fields(RunConfig) if f.name not in SECTIONS}


def _coerce(value: Any, default: Any, where: str) -> Any:
    """Convert a YAML/CLI value to the type of the field's default."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [part for part in value.replace(",", " ").split()]
            return tuple(type(default[0])(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot read {value!r} as {type(default).__name__}") from None
    return str(value) if isinstance(default, str) else value


def _split_overrides(overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """{'train.learning_rate': x, 'seed': 1} -> {'train': {'learning_rate': x}, 'seed': 1}."""
    nested: Dict[str, Any] = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, Mapping):
            nested.setdefault(key, {}).update(value)
            continue
        section, dot, name = key.partition(".")
        if dot:
            nested.setdefault(section, {})[name] = value
        else:
            nested[key] = value
    return nested


def _merge(resolved: Dict[str, Any], layer: Mapping[str, Any], source: str):
    """Fold one layer of settings into `resolved`, key by key within sections."""
    for key, value in layer.items():
        if key in SECTIONS:
            if value is None:
                continue
            if not isinstance(value, Mapping):
                raise ConfigError(f"{source}: section '{key}' must be a mapping, got {type(value).__name__}")
            defaults = asdict(SECTIONS[key]())
            for name, item in value.items():
                if name not in defaults:
                    raise ConfigError(f"{source}: unknown key '{name}' in section '{key}'")
                resolved[key][name] = _coerce(item, defaults[name], f"{source}: {key}.{name}")
        elif key in TOP_LEVEL:
            resolved["top"][key] = _coerce(value, TOP_LEVEL[key], f"{source}: {key}")
        else:
            raise ConfigError(f"{source}: unknown key '{key}' in section 'top level'")


def _read_yaml(path: str) -> Mapping[str, Any]:
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"{path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping, got {type(data).__name__}")
    return data


def load_run_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Resolve a RunConfig: defaults < COAM_SEED < YAML file < overrides."""
    load_dotenv()
    resolved: Dict[str, Any] = {"top": {}, **{name: {} for name in SECTIONS}}

    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None and env_seed.strip():
        _merge(resolved, {"seed": env_seed.strip()}, f"environment {SEED_ENV_VAR}")
    if path:
        _merge(resolved, _read_yaml(path), path)
        logger.info(f"Loaded run configuration from {path}")
    if overrides:
        _merge(resolved, _split_overrides(overrides), "command line")

    seed = resolved["top"].get("seed", TOP_LEVEL["seed"])
    for section, seed_field in SEEDED_FIELDS.items():
        resolved[section].setdefault(seed_field, seed)

    source = path or "defaults"
    sections = {}
    for name, cls in SECTIONS.items():
        try:
            sections[name] = cls(**resolved[name])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{source}: invalid section '{name}': {e}") from e
    try:
        return RunConfig(**sections, **resolved["top"])
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from e


def _plain(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def run_config_dict(config: RunConfig) -> Dict[str, Any]:
    data = {name: getattr(config, name) for name in TOP_LEVEL}
    for name in SECTIONS:
        data[name] = _plain(asdict(getattr(config, name)))
    return data


def save_run_config(config: RunConfig, path: str) -> str:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(run_config_dict(config), f, sort_keys=False, default_flow_style=False)
    logger.info(f"Saved run configuration to {path}")
    return path
