"""TOML config files: one top-level table of run settings plus one sub-table per
component (``[model]``, ``[optim]``, ``[gate_cfg]``, ...)."""
from __future__ import annotations

from pathlib import Path

import tomlkit

from ..tapecore import ConfigError
from ..trainer import EXPERIMENTS, ExperimentConfig, experiment


def write_config(path: str | Path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(tomlkit.dumps(cfg.to_dict()))


def read_config(path: str | Path) -> ExperimentConfig:
    """Parse a config file.  A ``base = "<experiment>"`` key starts from a named
    experiment and overrides only the keys given."""
    path = Path(path)
    try:
        raw = tomlkit.parse(path.read_text()).unwrap()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from e
    except tomlkit.exceptions.ParseError as e:
        raise ConfigError(f"{path}: {e}") from e
    base = raw.pop("base", None)
    if base is not None:
        merged = experiment(base).to_dict()
        for k, v in raw.items():
            if isinstance(v, dict) and isinstance(merged.get(k), dict):
                merged[k].update(v)
            else:
                merged[k] = v
        raw = merged
    return ExperimentConfig.from_dict(raw)


def resolve_config(ref: str) -> ExperimentConfig:
    """A named experiment or a path to a TOML file."""
    if ref in EXPERIMENTS:
        return experiment(ref)
    if Path(ref).suffix == ".toml" or Path(ref).exists():
        return read_config(ref)
    raise ConfigError(f"unknown config {ref!r}; valid names: {', '.join(EXPERIMENTS)}")
