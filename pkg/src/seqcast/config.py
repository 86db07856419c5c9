"""Run configuration: TOML files, presets, and schema validation.

A run config has four sections -- dataset, model, training, evaluation --
with documented defaults.  The named presets encode the published
hyperparameter tables for the Mackey-Glass and Darwin protocols plus the
desk-scale traveling-wave case.  Unknown keys are rejected with their path.
"""

from __future__ import annotations

import copy

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


_SCHEMA: dict[str, dict[str, type | tuple]] = {
    "dataset": {
        "kind": str,            # mackey | darwin | wave
        "path": str,            # dataset dir (train/evaluate) or CSV (darwin)
        "snr_db": (int, float),
        "total_time": (int, float),
        "n_train_seq": int,
        "seq_len": int,
        "steps": int,           # wave
        "speed": (int, float),  # wave
        "grid": list,           # wave [H, W]
    },
    "model": {
        "d_h": int,
        "seed": int,
    },
    "training": {
        "mode": str,            # tf | ar | ss | sa
        "epochs": int,
        "lr": (int, float),
        "seq_len": int,         # BPTT window length L
        "batch_size": int,
        "schedule_k": (int, float),
        "patience": int,
    },
    "evaluation": {
        "n_cases": int,
        "warmup": int,
        "horizon": int,
        "grid": list,           # enables SSIM on grid data
    },
}

_DEFAULTS: dict[str, dict[str, Any]] = {
    "dataset": {"kind": "mackey"},
    "model": {"d_h": 100, "seed": 1},
    "training": {
        "mode": "sa", "epochs": 2000, "lr": 0.0005, "seq_len": 40,
        "batch_size": 32, "patience": 50,
    },
    "evaluation": {"n_cases": 100, "warmup": 20, "horizon": 896},
}

PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "mackey-snr60": {
        "dataset": {"kind": "mackey", "snr_db": 60, "total_time": 2e5,
                    "n_train_seq": 32, "seq_len": 1120},
        "model": {"d_h": 100, "seed": 1},
        "training": {"mode": "sa", "epochs": 2000, "lr": 0.0005,
                     "seq_len": 40, "batch_size": 32, "patience": 50},
        "evaluation": {"n_cases": 100, "warmup": 20, "horizon": 896},
    },
    "mackey-snr10": {
        "dataset": {"kind": "mackey", "snr_db": 10, "total_time": 2e5,
                    "n_train_seq": 32, "seq_len": 1120},
        "model": {"d_h": 100, "seed": 1},
        "training": {"mode": "sa", "epochs": 2000, "lr": 0.0005,
                     "seq_len": 40, "batch_size": 32, "patience": 50},
        "evaluation": {"n_cases": 100, "warmup": 20, "horizon": 896},
    },
    "darwin": {
        "dataset": {"kind": "darwin"},
        "model": {"d_h": 100, "seed": 1},
        "training": {"mode": "sa", "epochs": 2000, "lr": 0.0001,
                     "seq_len": 100, "batch_size": 32, "patience": 50},
        "evaluation": {"n_cases": 32, "warmup": 50, "horizon": 100},
    },
    "wave": {
        "dataset": {"kind": "wave", "steps": 600, "speed": 0.05, "grid": [8, 16]},
        "model": {"d_h": 24, "seed": 1},
        "training": {"mode": "sa", "epochs": 1000, "lr": 0.001,
                     "seq_len": 20, "batch_size": 32, "patience": 50},
        "evaluation": {"n_cases": 10, "warmup": 20, "horizon": 100,
                       "grid": [8, 16]},
    },
}


@dataclass
class RunConfig:
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "dataset": self.dataset, "model": self.model,
            "training": self.training, "evaluation": self.evaluation,
        }


def _validate(doc: dict) -> None:
    for section, content in doc.items():
        if section == "preset":
            continue
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(content, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in content.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            expected = _SCHEMA[section][key]
            if not isinstance(value, expected):
                raise ConfigError(
                    f"{section}.{key}: expected {expected}, got {type(value).__name__}"
                )


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for section, content in override.items():
        if section == "preset":
            continue
        out.setdefault(section, {}).update(content)
    return out


def load_config(path: str | None = None, preset: str | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Assemble a config from defaults, optional preset, file, and overrides."""
    doc: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                doc = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        _validate(doc)
        preset = doc.get("preset", preset)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {preset!r}; available: {', '.join(sorted(PRESETS))}"
            )
        merged = _merge(copy.deepcopy(_DEFAULTS), PRESETS[preset])
    else:
        merged = copy.deepcopy(_DEFAULTS)
    merged = _merge(merged, doc)
    if overrides:
        _validate(overrides)
        merged = _merge(merged, overrides)
    _validate(merged)
    return RunConfig(**merged)
