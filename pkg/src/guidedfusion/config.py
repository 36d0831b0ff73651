"""Command-scoped run configuration: defaults < YAML file < command-line flags.

Every command writes the resolved values, and where each one came from, to
``resolved_config.yaml`` in its output directory. Passing that file back via
``--config`` reproduces the run.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .losses import LAMBDA_NAMES, LossWeights
from .net import PRESETS, NetConfig
from .trainer import TrainConfig

HOME_ENV = "GUIDEDFUSION_HOME"
DEFAULT_HOME = "guidedfusion_runs"
RESOLVED_NAME = "resolved_config.yaml"

_TRAIN = {
    "data": None,
    "out": None,
    "preset": "large",
    "base_width": None,
    "depth": 4,
    "norm": "none",
    "activation": "relu",
    "epochs": 2,
    "batch_size": 4,
    "lr": 1e-4,
    "weight_decay": 0.01,
    "seed": 0,
    "precision": "full",
    "mode": "guided",
    "levels": 4,
    "max_steps": None,
    "cosine": False,
    **LossWeights().to_dict(),
}

DEFAULTS: dict[str, dict] = {
    "train": dict(_TRAIN),
    "fuse": {
        "data": None, "vis": None, "ir": None, "checkpoint": None, "rule": None,
        "out": None, "mode": "guided", "batch": 1, "levels": 4, "export_pyramid": False,
    },
    "eval": {"fused": None, "data": None, "out": None, "reward": False},
    "grid-search": {
        **_TRAIN,
        "preset": "medium",
        "probe_epochs": 2,
        "holdout": 0.25,
        "eval_data": None,
        "grid": {
            "lambda_max": [0.5, 1.0, 2.0, 4.0],
            "lambda_grad": [0.5, 1.0, 2.0],
            "lambda_ssim": [0.1, 0.25, 0.5, 1.0],
            "lambda_consist": [0.0, 0.05, 0.1, 0.2, 0.5],
        },
        "pivot": ["lambda_ssim", "lambda_grad"],
    },
    "bench": {
        "data": None, "checkpoint": None, "out": None, "preset": "large", "batch": 16,
        "warm_steps": 2, "steps": 5, "train_batch": 4, "levels": 4, "repeats": 3,
        "presets": ["small", "medium", "large"], "seed": 0,
    },
    "scaling-study": {
        **_TRAIN,
        "presets": ["medium", "large"],
        "epochs_list": [6, 6],
        "holdout": 0.25,
        "eval_data": None,
        "threshold": None,
        "latency_batch": 16,
    },
    "synth": {"out": None, "count": 16, "height": 64, "width": 80, "seed": 1},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str
    values: dict
    sources: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def net_config(self, preset: str | None = None) -> NetConfig:
        v = self.values
        name = preset or v.get("preset", "large")
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        width = v.get("base_width") if preset is None and v.get("base_width") else PRESETS[name]
        return NetConfig(
            base_width=int(width),
            depth=int(v.get("depth", 4)),
            norm=v.get("norm", "none"),
            activation=v.get("activation", "relu"),
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(**{k: float(self.values[k]) for k in LAMBDA_NAMES})

    def train_config(self, checkpoint_dir: str | None = None) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=int(v["epochs"]),
            batch_size=int(v["batch_size"]),
            learning_rate=float(v["lr"]),
            loss_weights=self.loss_weights(),
            seed=int(v["seed"]),
            precision=v["precision"],
            net=self.net_config(),
            mode=v["mode"],
            levels=int(v["levels"]),
            weight_decay=float(v["weight_decay"]),
            cosine_schedule=bool(v["cosine"]),
            max_steps=None if v.get("max_steps") is None else int(v["max_steps"]),
            checkpoint_dir=checkpoint_dir,
        )

    def output_dir(self) -> Path:
        out = self.values.get("out")
        if out:
            return Path(out)
        return Path(os.environ.get(HOME_ENV, DEFAULT_HOME)) / self.command

    def write(self, out_dir: str | Path | None = None) -> Path:
        out_dir = Path(out_dir) if out_dir is not None else self.output_dir()
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / RESOLVED_NAME
        doc = {"command": self.command, "values": self.values, "sources": self.sources}
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(doc, fh, sort_keys=True)
        return path


def load_file(path: str | Path, command: str) -> dict:
    """Read a YAML mapping. A previously written resolved config is unwrapped."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if "values" in doc and "command" in doc:
        if doc["command"] != command:
            raise ConfigError(f"{path} was written by '{doc['command']}', not '{command}'")
        doc = doc["values"]
    return doc


def resolve(command: str, file_values: dict | None = None, flags: dict | None = None) -> RunConfig:
    if command not in DEFAULTS:
        raise ConfigError(f"unknown command {command!r}")
    defaults = DEFAULTS[command]
    file_values = file_values or {}
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    unknown = sorted((set(file_values) | set(flags)) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown keys for '{command}': {unknown}")
    values, sources = {}, {}
    for key, default in defaults.items():
        if key in flags:
            values[key], sources[key] = flags[key], "flag"
        elif key in file_values:
            values[key], sources[key] = file_values[key], "file"
        else:
            values[key], sources[key] = default, "default"
    for key in ("data", "eval_data", "fused", "vis", "ir", "checkpoint", "out"):
        if isinstance(values.get(key), Path):
            values[key] = str(values[key])
    return RunConfig(command, values, sources)
