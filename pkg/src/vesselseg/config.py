"""Run configuration: JSON files, command-line overrides, and run manifests.

A config file is a JSON object with any subset of these sections (missing keys
keep their defaults)::

    {
      "seed": 0,
      "threshold": 0.5,
      "preprocess": {"tiles_x": 8, "tiles_y": 8, "clip_limit": 2.0, "bins": 256, "gamma": 0.8333},
      "dpcn": {"beta": 64.0, "alpha_e": 0.1, "v_e": 7.0, "iterations": 15},
      "model": {"levels": 4, "base_channels": 16, "use_dpcn": true,
                "dpcn_iterations": [5, 10, 15], "deep_supervision": true,
                "standardize_input": true, "side_output_weights": null},
      "loss": {"w0": 0.9, "w1": 0.1, "eps": 1e-7, "dice_numerator": "product"},
      "train": {"epochs": 30, "batch_size": 8, "lr": 1e-4, "beta1": 0.9,
                "beta2": 0.999, "eps": 1e-8},
      "phantom": {"size": [256, 256], "n_trees": 3, "width_range": [1, 20],
                  "vessel_contrast": 0.06, "noise_sigma": 0.01, "occluder": false,
                  "target_vessel_fraction": [0.07, 0.086], "background_variation": 0.04}
    }

Overrides use dotted keys, ``train.epochs=5``; values are parsed as JSON and
fall back to plain strings.
"""

from __future__ import annotations

import copy
import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np

from . import __version__
from .dpcn import DpcnParams
from .loss import LossConfig
from .m2net import M2NetConfig, TrainConfig
from .phantom import PhantomSpec
from .preprocess import ClaheConfig, PreprocessConfig


class ConfigFileError(ValueError):
    pass


def _defaults() -> dict[str, Any]:
    clahe = asdict(ClaheConfig())
    phantom = asdict(PhantomSpec())
    phantom.pop("seed")
    train = asdict(TrainConfig())
    train.pop("seed")
    model = asdict(M2NetConfig())
    model.pop("dpcn")
    return {
        "seed": 0,
        "threshold": 0.5,
        "preprocess": {**clahe, "gamma": PreprocessConfig().gamma},
        "dpcn": asdict(DpcnParams()),
        "model": model,
        "loss": asdict(LossConfig()),
        "train": train,
        "phantom": phantom,
    }


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigFileError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigFileError(f"config key {where!r} must be an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: _jsonable(_defaults()))

    @classmethod
    def load(cls, path: Optional[str | Path] = None, overrides: Iterable[str] = ()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigFileError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigFileError("config file must hold a JSON object")
            _merge(cfg.values, data)
        for item in overrides:
            cfg.set(item)
        cfg.validate()
        return cfg

    def set(self, assignment: str) -> None:
        key, sep, raw = assignment.partition("=")
        if not sep:
            raise ConfigFileError(f"override {assignment!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        update: dict[str, Any] = {}
        node = update
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
        _merge(self.values, update)

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True)

    # typed views; these raise on invalid values, which validate() relies on

    def clahe(self) -> ClaheConfig:
        p = self.values["preprocess"]
        return ClaheConfig(**{f.name: p[f.name] for f in fields(ClaheConfig)})

    def preprocess(self) -> PreprocessConfig:
        return PreprocessConfig(clahe=self.clahe(), gamma=float(self.values["preprocess"]["gamma"]))

    def dpcn(self) -> DpcnParams:
        return DpcnParams(**self.values["dpcn"])

    def model(self) -> M2NetConfig:
        m = dict(self.values["model"])
        m["dpcn_iterations"] = tuple(m["dpcn_iterations"])
        if m["side_output_weights"] is not None:
            m["side_output_weights"] = tuple(m["side_output_weights"])
        return M2NetConfig(dpcn=self.dpcn(), **m)

    def loss(self) -> LossConfig:
        return LossConfig(**self.values["loss"])

    def train(self) -> TrainConfig:
        return TrainConfig(seed=int(self.values["seed"]), **self.values["train"])

    def phantom(self) -> PhantomSpec:
        p = dict(self.values["phantom"])
        for key in ("size", "width_range", "target_vessel_fraction"):
            p[key] = tuple(p[key])
        return PhantomSpec(seed=int(self.values["seed"]), **p)

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def threshold(self) -> float:
        return float(self.values["threshold"])

    def validate(self) -> None:
        try:
            self.preprocess()
            self.model().validate()
            self.loss()
            self.train()
            self.phantom()
        except (TypeError, ValueError) as exc:
            raise ConfigFileError(f"invalid config: {exc}") from exc
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigFileError("threshold must lie in [0, 1]")


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    """What a command did: enough to rerun it and check the outputs."""

    command: str
    config: dict[str, Any]
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: list[str] = field(default_factory=list)
    wall_time: float = 0.0
    version: str = __version__
    numpy_version: str = np.__version__
    python_version: str = platform.python_version()
    status: str = "ok"
    errors: list[str] = field(default_factory=list)
    notes: dict[str, Any] = field(default_factory=dict)

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(path)] = file_sha256(path)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def effective_config(cfg: RunConfig) -> dict[str, Any]:
    return copy.deepcopy(cfg.values)
