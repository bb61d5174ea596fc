"""Fine-pruning: mask the least active expert hidden units, then fine-tune on clean data."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import harness, pmoe
from .dataset import CapacityError, Dataset
from .pmoe import PmoeModel
from .triggers import TriggerSpec

STAGES = ("before", "pruned", "finetuned")
REPORT_HEADER = ["pruning_rate", "stage", "ba", "asr"]


@dataclass
class DefenseConfig:
    pruning_rate: float = 0.1
    fine_tune_epochs: int = 5
    # None uses every clean sample handed to fine_prune
    clean_subset_size: Optional[int] = None
    seed: int = 0
    lr: float = 0.1
    batch: int = 128

    def __post_init__(self):
        if not 0.0 <= self.pruning_rate < 1.0:
            raise ValueError(f"pruning_rate must lie in [0, 1), got {self.pruning_rate}")
        if self.fine_tune_epochs < 0:
            raise ValueError("fine_tune_epochs must be >= 0")


@dataclass
class StageMetrics:
    stage: str
    ba: float
    asr: float


def mean_activations(model: PmoeModel, images: np.ndarray, batch: int = 500) -> np.ndarray:
    """Mean relu activation ``(n, hidden)`` over images and their selected patches.

    Uses the current mask, so already pruned units report zero.
    """
    if len(images) == 0:
        raise CapacityError("no clean data for activation ranking")
    c = model.config
    w1 = model["w1"].data
    b1 = model["b1"].data
    total = np.zeros((c.n, c.hidden), dtype=np.float64)
    for i in range(0, len(images), batch):
        x = model.patches(images[i : i + batch])
        idx, _ = pmoe.select(model, x)
        b = x.shape[0]
        for e in range(c.n):
            picked = x[np.arange(b)[:, None], idx[:, e]].reshape(-1, x.shape[-1])  # (b*k, P)
            act = np.maximum(picked @ w1[e] + b1[e], 0) * model.mask[e]
            total[e] += act.sum(axis=0, dtype=np.float64)
    return total / (len(images) * idx.shape[-1])


def rank_units(model: PmoeModel, clean_data: Dataset | np.ndarray) -> np.ndarray:
    """Per-expert hidden units ordered by mean activation ascending (ties to the lower index)."""
    images = clean_data.images if isinstance(clean_data, Dataset) else np.asarray(clean_data)
    return np.argsort(mean_activations(model, images), axis=1, kind="stable")


def prune(model: PmoeModel, rate: float, ranking: np.ndarray) -> PmoeModel:
    """Zero the mask of the ``floor(rate * hidden)`` least active units of every expert, in place."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    count = math.floor(rate * model.config.hidden)
    for e in range(model.config.n):
        model.mask[e, ranking[e, :count]] = 0
    return model


def fine_tune(model: PmoeModel, clean_data: Dataset, epochs: int, lr: float = 0.1, batch: int = 128, seed: int = 0) -> PmoeModel:
    """Plain SGD on clean data; pruned units stay masked and get zero gradient."""
    model, _ = harness.train(model, clean_data, harness.TrainConfig(epochs=epochs, lr=lr, batch=batch), seed)
    return model


def fine_prune(
    model: PmoeModel,
    cfg: DefenseConfig,
    clean_data: Dataset,
    test_set: Dataset,
    spec: TriggerSpec,
    target_label: int = 0,
) -> tuple[PmoeModel, list[StageMetrics]]:
    """Prune then fine-tune a copy of ``model``; BA and ASR before, after pruning and after tuning."""
    if cfg.clean_subset_size is not None:
        if cfg.clean_subset_size > len(clean_data):
            raise CapacityError(f"need {cfg.clean_subset_size} clean samples, have {len(clean_data)}")
        clean_data = clean_data.subset(np.arange(cfg.clean_subset_size))
    l = model.config.l
    triggered = harness.triggered_test(test_set, spec, target_label, l)

    def measure(stage: str, m: PmoeModel) -> StageMetrics:
        return StageMetrics(stage, harness.evaluate_ba(m, test_set), harness.asr_from_images(m, triggered, target_label))

    report = [measure("before", model)]
    out = model.copy()
    prune(out, cfg.pruning_rate, rank_units(out, clean_data))
    report.append(measure("pruned", out))
    fine_tune(out, clean_data, cfg.fine_tune_epochs, cfg.lr, cfg.batch, cfg.seed)
    report.append(measure("finetuned", out))
    return out, report


def report_rows(rate: float, report: list[StageMetrics]) -> list[list]:
    return [[harness._fmt(rate), r.stage, harness._fmt(r.ba), harness._fmt(r.asr)] for r in report]
