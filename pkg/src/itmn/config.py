"""Strict JSON run configuration shared by the command-line tools.

A run config has five sections plus one top-level ``seed``::

    {
      "seed": 0,
      "data":  {"path": null, "count": 2000, "resolution": 64, "day_fraction": 0.5},
      "model": {"strategy": "late", "awareness": "both", "box_variant": "improved",
                "input_size": 64, "fwn_downsample": 2},
      "train": {"base_lr": 0.1, "epochs": 8, ...},
      "quant": {"rounding": "half-even", "finetune_epochs": 5},
      "eval":  {"mode": "log", "splits": ["all", "day", "night"]}
    }

Unknown keys anywhere are rejected.  Every random stream derives from the
top-level seed through :func:`sub_seed` with a fixed purpose label, so the
config alone pins a run.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import BoxConfig
from .backbone import DESK96_PYRAMID, DESK_PYRAMID, REFERENCE_PYRAMID
from .fusion import AWARENESS, STRATEGIES, ModelConfig
from .trainer import DESK_TRAIN, TrainConfig

PURPOSES = {"data": 1, "model": 2, "train": 3, "test-data": 4}
PYRAMIDS = {64: DESK_PYRAMID, 96: DESK96_PYRAMID, 300: REFERENCE_PYRAMID}


class ConfigError(ValueError):
    """Invalid run configuration."""


def sub_seed(seed: int, purpose: str) -> int:
    """Independent 32-bit seed for one purpose ("data", "model", "train", "test-data")."""
    return int(np.random.SeedSequence([int(seed), PURPOSES[purpose]]).generate_state(1)[0])


DEFAULTS = {
    "seed": 0,
    "data": {"path": None, "count": 2000, "resolution": 64, "day_fraction": 0.5},
    "model": {"strategy": "late", "awareness": "both", "box_variant": "improved", "input_size": 64, "fwn_downsample": 2},
    "train": {k: v for k, v in DESK_TRAIN.to_dict().items() if k != "seed"},
    "quant": {"rounding": "half-even", "finetune_epochs": 5},
    "eval": {"mode": "log", "splits": ["all", "day", "night"]},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        cfg = cls(_merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file {path} not found") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}") from e
        return cls.from_dict(d)

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    # -- typed views ---------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def model_config(self) -> ModelConfig:
        m = self.raw["model"]
        pyramid = PYRAMIDS[m["input_size"]]
        box = BoxConfig(extents=pyramid.level_extents, variant=m["box_variant"])
        return ModelConfig(strategy=m["strategy"], awareness=m["awareness"], pyramid=pyramid, box=box,
                           fwn_downsample=m["fwn_downsample"])

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.raw["train"], "seed": sub_seed(self.seed, "train")})

    @property
    def model_seed(self) -> int:
        return sub_seed(self.seed, "model")

    def validate(self):
        """Collect every schema violation before raising, so all are reported at once."""
        errors = []
        r = self.raw
        if not isinstance(r["seed"], int) or r["seed"] < 0:
            errors.append("seed must be a non-negative integer")
        d = r["data"]
        if d["path"] is not None and not isinstance(d["path"], str):
            errors.append("data.path must be a string or null")
        if not isinstance(d["count"], int) or d["count"] < 1:
            errors.append("data.count must be a positive integer")
        if not isinstance(d["resolution"], int) or d["resolution"] < 16:
            errors.append("data.resolution must be an integer >= 16")
        if not isinstance(d["day_fraction"], (int, float)) or not 0 <= d["day_fraction"] <= 1:
            errors.append("data.day_fraction must lie in [0, 1]")
        m = r["model"]
        if m["strategy"] not in STRATEGIES:
            errors.append(f"model.strategy must be one of {list(STRATEGIES)}")
        if m["awareness"] not in AWARENESS:
            errors.append(f"model.awareness must be one of {list(AWARENESS)}")
        if m["box_variant"] not in ("improved", "original-ssd"):
            errors.append("model.box_variant must be 'improved' or 'original-ssd'")
        if m["input_size"] not in PYRAMIDS:
            errors.append(f"model.input_size must be one of {sorted(PYRAMIDS)}")
        elif not isinstance(m["fwn_downsample"], int) or m["fwn_downsample"] < 1 or m["input_size"] % m["fwn_downsample"]:
            errors.append("model.fwn_downsample must be a positive divisor of model.input_size")
        q = r["quant"]
        if q["rounding"] not in ("half-even", "floor"):
            errors.append("quant.rounding must be 'half-even' or 'floor'")
        if not isinstance(q["finetune_epochs"], int) or q["finetune_epochs"] < 0:
            errors.append("quant.finetune_epochs must be a non-negative integer")
        e = r["eval"]
        if e["mode"] not in ("log", "arith"):
            errors.append("eval.mode must be 'log' or 'arith'")
        if not isinstance(e["splits"], list) or not set(e["splits"]) <= {"all", "day", "night"} or not e["splits"]:
            errors.append("eval.splits must be a non-empty list drawn from all/day/night")
        if not errors:
            try:
                self.train_config()
                self.model_config()
            except (TypeError, ValueError) as exc:
                errors.append(str(exc))
        if errors:
            raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
        return self
