"""JSON experiment configuration with strict key checking.

Layout::

    {
      "name": "square-2pct", "seed": 0, "repeats": 3,
      "dataset": {"num_classes": 10, "per_class": 500, "test_per_class": 100,
                  "h": 32, "w": 32, "channels": 3, "seed": 0},
      "model":   {"l": 64, "k": 16, "n": 4, "hidden": 64, "summary": 64},
      "trigger": {"family": "square", "mode": "routing_agnostic", "size_px": 4,
                  "anchor": [0, 0], "alpha": 0.2, "k_w": 2, "s": 0.25, "seed": 0,
                  "badpatch_count": null, "trigger_image": null},
      "poison":  {"rate": 0.02, "target_label": 0},
      "train":   {"epochs": 25, "lr": 0.1, "batch": 128},
      "defense": {"pruning_rates": [0.1, 0.2, 0.3], "fine_tune_epochs": 5,
                  "clean_subset_size": null, "lr": 0.1, "seed": 0},
      "sweep":   {"l_values": [4, 16, 64], "badpatch_counts": [4, 16, 64]}
    }

Every section and key is optional; unknown ones raise :class:`ConfigError`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from . import netpbm
from .dataset import PoisonConfig
from .harness import DataConfig, ExperimentConfig, TrainConfig
from .pmoe import ModelConfig
from .triggers import TriggerSpec, make_blend_pattern


class ConfigError(ValueError):
    """The configuration document is malformed or inconsistent."""


TOP_KEYS = {"name", "seed", "repeats", "dataset", "model", "trigger", "poison", "train", "defense", "sweep"}
SECTION_KEYS = {
    "dataset": {"num_classes", "per_class", "test_per_class", "h", "w", "channels", "seed"},
    "model": {"l", "k", "n", "hidden", "summary"},
    "trigger": {"family", "mode", "size_px", "anchor", "alpha", "k_w", "s", "seed", "badpatch_count", "trigger_image"},
    "poison": {"rate", "target_label"},
    "train": {"epochs", "lr", "batch"},
    "defense": {"pruning_rates", "fine_tune_epochs", "clean_subset_size", "lr", "seed"},
    "sweep": {"l_values", "badpatch_counts"},
}


@dataclass
class DefenseSection:
    pruning_rates: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.3])
    fine_tune_epochs: int = 5
    clean_subset_size: Optional[int] = None
    lr: float = 0.1
    seed: int = 0


@dataclass
class SweepSection:
    l_values: list[int] = field(default_factory=lambda: [4, 16, 64])
    badpatch_counts: list[int] = field(default_factory=lambda: [4, 16, 64])


@dataclass
class Config:
    experiment: ExperimentConfig
    defense: DefenseSection
    sweep: SweepSection
    raw: dict


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(sec) - SECTION_KEYS[name]
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(sorted(unknown))}")
    return sec


def _int(v: Any, what: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{what} must be an integer, got {v!r}")
    return v


def from_dict(doc: dict, base_dir: str | os.PathLike = ".") -> Config:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    try:
        return _build(doc, Path(base_dir))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _build(doc: dict, base: Path) -> Config:
    data = DataConfig(**_section(doc, "dataset"))
    for k, v in vars(data).items():
        _int(v, f"dataset.{k}")
    model = ModelConfig(num_classes=data.num_classes, **_section(doc, "model"))

    trig = dict(_section(doc, "trigger"))
    trig.setdefault("family", "square")
    image_path = trig.pop("trigger_image", None)
    if trig["family"] == "blend":
        if image_path is not None:
            img = netpbm.read_image(base / image_path)
            trig["trigger_image"] = img if img.ndim == 3 else img[..., None]
        else:
            trig["trigger_image"] = make_blend_pattern(data.h, data.w, data.channels, trig.get("seed", 0))
    elif image_path is not None:
        raise ConfigError("trigger_image only applies to the blend family")
    spec = TriggerSpec(**trig)

    poison = PoisonConfig(spec=spec, **{"rate": 0.0, **_section(doc, "poison")})
    if not 0 <= poison.target_label < data.num_classes:
        raise ConfigError(f"target_label {poison.target_label} outside 0..{data.num_classes - 1}")
    train = TrainConfig(**_section(doc, "train"))
    if train.epochs < 0 or train.batch < 1:
        raise ConfigError("train.epochs must be >= 0 and train.batch >= 1")
    exp = ExperimentConfig(
        model=model,
        poison=poison,
        train=train,
        data=data,
        repeats=_int(doc.get("repeats", 3), "repeats"),
        seed=_int(doc.get("seed", 0), "seed"),
        name=str(doc.get("name", "experiment")),
    )
    defense = DefenseSection(**_section(doc, "defense"))
    if any(not 0 <= r < 1 for r in defense.pruning_rates):
        raise ConfigError("pruning rates must lie in [0, 1)")
    sweep = SweepSection(**_section(doc, "sweep"))
    return Config(exp, defense, sweep, doc)


def load(path: str | os.PathLike) -> Config:
    """Parse a config file; syntax errors become :class:`ConfigError`, missing files ``OSError``."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(doc, Path(path).parent)
