"""Experiment configuration: a JSON file plus ``--set path=value`` overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .data import INPUT_MODES
from .models import ARCHITECTURES, ModelConfig, budget_matched
from .training import TrainConfig


class ConfigError(ValueError):
    """A config field is missing, mistyped or inconsistent; ``path`` names it."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


DEFAULTS: dict[str, Any] = {
    "data": {
        "csv": None,
        "cache": None,
        "ticker": None,
        "T_in": 20,
        "T_out": 20,
        "N": 1,
        "input_mode": "prices",
        "overlap": False,
        "stride": 1,
    },
    "model": {
        "arch": "proposed",
        "base_channels": 16,
        "fusion_channels": None,
        "kernel_size": 3,
        "hidden": [64, 64],
        "match_budget": True,
    },
    "train": {
        "epochs": 300,
        "batch_size": 16,
        "lr": 1e-3,
        "patience": 20,
        "shuffle": True,
    },
    "out": "runs/default",
    "seed": 0,
}

_INT = (int,)
_NUM = (int, float)
_TYPES: dict[str, tuple] = {
    "data.csv": (str, type(None)),
    "data.cache": (str, type(None)),
    "data.ticker": (str, type(None)),
    "data.T_in": _INT,
    "data.T_out": _INT,
    "data.N": _INT,
    "data.input_mode": (str,),
    "data.overlap": (bool,),
    "data.stride": _INT,
    "model.arch": (str,),
    "model.base_channels": _INT,
    "model.fusion_channels": (int, type(None)),
    "model.kernel_size": _INT,
    "model.hidden": (list,),
    "model.match_budget": (bool,),
    "train.epochs": _INT,
    "train.batch_size": _INT,
    "train.lr": _NUM,
    "train.patience": _INT,
    "train.shuffle": (bool,),
    "out": (str,),
    "seed": _INT,
}


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown field")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected an object")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(text, "override must look like path=value")
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path.strip(), value


def apply_override(raw: dict, path: str, value: Any) -> None:
    parts = path.split(".")
    node = raw
    for i, part in enumerate(parts[:-1]):
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(".".join(parts[: i + 1]), "unknown section")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(path, "unknown field")
    node[parts[-1]] = value


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None, overrides=()) -> "ExperimentConfig":
        raw = _merge(DEFAULTS, d)
        for item in overrides:
            apply_override(raw, *parse_override(item))
        cfg = cls(raw, Path(base_dir) if base_dir else Path.cwd())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides=()) -> "ExperimentConfig":
        if path is None:
            return cls.from_dict({}, overrides=overrides)
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError("<config>", f"file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("<config>", f"invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError("<config>", "top level must be an object")
        return cls.from_dict(d, base_dir=path.parent, overrides=overrides)

    def get(self, path: str) -> Any:
        node = self.raw
        for part in path.split("."):
            node = node[part]
        return node

    def validate(self) -> None:
        for path, types in _TYPES.items():
            v = self.get(path)
            if isinstance(v, bool) and bool not in types:
                raise ConfigError(path, f"expected {types[0].__name__}, got bool")
            if not isinstance(v, types):
                raise ConfigError(path, f"expected {types[0].__name__}, got {type(v).__name__}")
        d, m, t = self.raw["data"], self.raw["model"], self.raw["train"]
        if d["T_out"] < 1:
            raise ConfigError("data.T_out", "must be >= 1")
        if d["T_in"] not in (d["T_out"], 2 * d["T_out"]):
            raise ConfigError("data.T_in", f"must equal T_out or 2*T_out (T_out={d['T_out']})")
        if d["T_in"] % 4:
            raise ConfigError("data.T_in", "must be divisible by 4")
        if d["N"] < 1:
            raise ConfigError("data.N", "must be >= 1")
        if d["input_mode"] not in INPUT_MODES:
            raise ConfigError("data.input_mode", f"must be one of {INPUT_MODES}")
        if d["stride"] < 1:
            raise ConfigError("data.stride", "must be >= 1")
        if m["arch"] not in ARCHITECTURES:
            raise ConfigError("model.arch", f"must be one of {ARCHITECTURES}")
        for key in ("base_channels", "kernel_size"):
            if m[key] < 1:
                raise ConfigError(f"model.{key}", "must be >= 1")
        if m["fusion_channels"] is not None and m["fusion_channels"] < 1:
            raise ConfigError("model.fusion_channels", "must be >= 1")
        if not m["hidden"] or not all(isinstance(h, int) and h >= 1 for h in m["hidden"]):
            raise ConfigError("model.hidden", "must be a non-empty list of positive integers")
        if t["epochs"] < 1:
            raise ConfigError("train.epochs", "must be >= 1")
        if t["batch_size"] < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if t["patience"] < 0:
            raise ConfigError("train.patience", "must be >= 0")
        if not t["lr"] > 0:
            raise ConfigError("train.lr", "must be positive")

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def with_frames(self, N: int) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["data"]["N"] = N
        cfg = ExperimentConfig(raw, self.base_dir)
        cfg.validate()
        return cfg

    @property
    def sample_stride(self) -> Optional[int]:
        d = self.raw["data"]
        return d["stride"] if d["overlap"] else None

    def model_config(self) -> ModelConfig:
        """Baselines are resized to the proposed model's parameter count unless
        ``model.match_budget`` is false."""
        d, m = self.raw["data"], self.raw["model"]
        mc = ModelConfig(T_in=d["T_in"], T_out=d["T_out"], N=d["N"],
                         base_channels=m["base_channels"], fusion_channels=m["fusion_channels"],
                         kernel_size=m["kernel_size"], seed=self.raw["seed"], arch=m["arch"],
                         hidden=tuple(m["hidden"]))
        return budget_matched(mc) if m["match_budget"] else mc

    def train_config(self, checkpoint_path=None) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=float(t["lr"]),
                           patience=t["patience"], seed=self.raw["seed"], shuffle=t["shuffle"],
                           checkpoint_path=checkpoint_path)
