"""TOML experiment configuration."""

from __future__ import annotations

import os
import sys
from dataclasses import fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import nn
from .extraction import ExtractionConfig
from .orchestrator import ExperimentConfig
from .scenario import AttackConfig, DPConfig, ScenarioConfig

SEED_ENV = "DISTFL_SEED"

_SECTIONS = {
    "scenario": ScenarioConfig,
    "attack": AttackConfig,
    "dp": DPConfig,
    "train": nn.TrainConfig,
    "extraction": ExtractionConfig,
}


def _build(cls, table: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ValueError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    return cls(**table)


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in d:
            kwargs[name] = _build(cls, d.pop(name), name)
    top = {f.name for f in fields(ExperimentConfig)} - set(_SECTIONS)
    unknown = set(d) - top
    if unknown:
        raise ValueError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    kwargs.update(d)
    return ExperimentConfig(**kwargs)


def load_config(path, env=None) -> ExperimentConfig:
    """Read a TOML config; ``DISTFL_SEED`` in the environment overrides ``seed``."""
    env = os.environ if env is None else env
    with open(Path(path), "rb") as fh:
        d = tomllib.load(fh)
    if env.get(SEED_ENV):
        d["seed"] = int(env[SEED_ENV])
    return config_from_dict(d)
