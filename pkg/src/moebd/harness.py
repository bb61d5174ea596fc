"""Training, backdoor metrics and repeated-seed experiment drivers."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import pmoe
from .dataset import CapacityError, Dataset, PoisonConfig, PoisonManifest, generate_synthetic, poison_dataset
from .pmoe import ModelConfig, PmoeModel
from .rng import SplitMix64, derive_seed
from .triggers import TriggerSpec, apply_trigger_batch

log = logging.getLogger(__name__)

METRICS_HEADER = ["experiment", "trigger", "mode", "rate", "l", "k", "n", "seed", "asr", "ba", "cad"]


@dataclass
class TrainConfig:
    epochs: int = 25
    lr: float = 0.1
    batch: int = 128


@dataclass
class DataConfig:
    num_classes: int = 10
    per_class: int = 500
    test_per_class: int = 100
    h: int = 32
    w: int = 32
    channels: int = 3
    seed: int = 0


@dataclass
class ExperimentConfig:
    model: ModelConfig
    poison: PoisonConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    repeats: int = 3
    seed: int = 0
    name: str = "experiment"
    # routing l used by the model when it should differ from model.l
    routing_l_override: Optional[int] = None

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    def effective_model(self) -> ModelConfig:
        if self.routing_l_override is None:
            return self.model
        l = self.routing_l_override
        return dataclasses.replace(self.model, l=l, k=min(self.model.k, l))


@dataclass
class Metrics:
    asr: float
    ba: float
    cad: float
    seed: int
    config: dict = field(default_factory=dict)


@dataclass
class ExperimentResult:
    runs: list[Metrics]
    asr_mean: float
    asr_std: float
    ba_mean: float
    cad_mean: float
    clean_ba_mean: float
    models: list[PmoeModel] = field(default_factory=list, repr=False)
    losses: list[list[float]] = field(default_factory=list, repr=False)
    manifests: list[PoisonManifest] = field(default_factory=list, repr=False)


def repeat_seed(seed: int, r: int) -> int:
    return derive_seed(seed, f"repeat/{r}")


# ---------------------------------------------------------------------------
# training and metrics


def train(
    model: PmoeModel, train_set: Dataset, cfg: TrainConfig, seed: int = 0
) -> tuple[PmoeModel, list[float]]:
    """Mini-batch SGD; returns the model (updated in place) and mean loss per epoch.

    A trailing partial batch is skipped each epoch (shuffling rotates which
    samples fall into it).
    """
    n = len(train_set)
    if n == 0:
        raise CapacityError("empty training set")
    rng = SplitMix64(seed).spawn("shuffle")
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        stop = n - n % cfg.batch if n >= cfg.batch else n
        for i in range(0, stop, cfg.batch):
            idx = order[i : i + cfg.batch]
            total += pmoe.backward_step(model, train_set.images[idx], train_set.labels[idx], cfg.lr) * len(idx)
            seen += len(idx)
        losses.append(total / seen)
        log.debug("epoch %d loss %.4f", epoch, losses[-1])
    return model, losses


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return 100.0 * float(np.count_nonzero(pred == labels)) / len(labels)


def evaluate_ba(model: PmoeModel, clean_test: Dataset) -> float:
    if len(clean_test) == 0:
        raise CapacityError("empty test set")
    return accuracy(pmoe.predict_batch(model, clean_test.images), clean_test.labels)


def triggered_test(clean_test: Dataset, spec: TriggerSpec, target_label: int, l: int) -> np.ndarray:
    keep = clean_test.labels != target_label
    if not np.any(keep):
        raise CapacityError("no non-target samples to trigger")
    return apply_trigger_batch(clean_test.images[keep], spec, l)


def asr_from_images(model: PmoeModel, triggered: np.ndarray, target_label: int) -> float:
    pred = pmoe.predict_batch(model, triggered)
    return 100.0 * float(np.count_nonzero(pred == target_label)) / len(triggered)


def evaluate_asr(model: PmoeModel, clean_test: Dataset, spec: TriggerSpec, target_label: int, l: int) -> float:
    """Percent of triggered non-target test images classified as ``target_label``."""
    return asr_from_images(model, triggered_test(clean_test, spec, target_label, l), target_label)


def compute_cad(clean_model_ba: float, backdoored_ba: float) -> float:
    return clean_model_ba - backdoored_ba


# ---------------------------------------------------------------------------
# experiments

_data_cache: dict[tuple, tuple[Dataset, Dataset]] = {}
_clean_cache: dict[tuple, tuple[PmoeModel, float]] = {}


def load_data(cfg: DataConfig) -> tuple[Dataset, Dataset]:
    key = dataclasses.astuple(cfg)
    if key not in _data_cache:
        _data_cache[key] = generate_synthetic(
            cfg.num_classes, cfg.per_class, cfg.h, cfg.w, cfg.seed, cfg.test_per_class, cfg.channels
        )
    return _data_cache[key]


def clear_caches() -> None:
    _data_cache.clear()
    _clean_cache.clear()


def train_model(
    model_cfg: ModelConfig, train_set: Dataset, train_cfg: TrainConfig, seed: int
) -> tuple[PmoeModel, list[float]]:
    model = pmoe.build_model(model_cfg, train_set.images.shape[1:], derive_seed(seed, "init"))
    return train(model, train_set, train_cfg, derive_seed(seed, "train"))


def clean_reference(
    model_cfg: ModelConfig, data_cfg: DataConfig, train_cfg: TrainConfig, seed: int
) -> tuple[PmoeModel, float]:
    """Clean model sharing the repeat seed of a backdoored run, memoised."""
    key = (model_cfg, dataclasses.astuple(data_cfg), dataclasses.astuple(train_cfg), seed)
    if key not in _clean_cache:
        train_set, test_set = load_data(data_cfg)
        model, _ = train_model(model_cfg, train_set, train_cfg, seed)
        _clean_cache[key] = (model, evaluate_ba(model, test_set))
    return _clean_cache[key]


def run_single(cfg: ExperimentConfig, seed: int) -> tuple[Metrics, PmoeModel, list[float], PoisonManifest]:
    mcfg = cfg.effective_model()
    train_set, test_set = load_data(cfg.data)
    poison = dataclasses.replace(cfg.poison, seed=derive_seed(seed, "poison"))
    poisoned, manifest = poison_dataset(train_set, poison, mcfg.l)
    model, losses = train_model(mcfg, poisoned, cfg.train, seed)
    _, clean_ba = clean_reference(mcfg, cfg.data, cfg.train, seed)
    ba = evaluate_ba(model, test_set)
    asr = evaluate_asr(model, test_set, cfg.poison.spec, cfg.poison.target_label, mcfg.l)
    snapshot = {
        "l": mcfg.l,
        "k": mcfg.k,
        "n": mcfg.n,
        "rate": cfg.poison.rate,
        "poisoned": manifest.count,
        "badpatch_count": cfg.poison.spec.badpatch_count,
    }
    return Metrics(asr, ba, compute_cad(clean_ba, ba), seed, snapshot), model, losses, manifest


def run_experiment(cfg: ExperimentConfig, seeds: Iterable[int] | None = None, keep_models: bool = False) -> ExperimentResult:
    """Train a clean reference and a backdoored model per repeat and average."""
    seeds = list(seeds) if seeds is not None else [repeat_seed(cfg.seed, r) for r in range(cfg.repeats)]
    runs, models, losses, manifests = [], [], [], []
    for s in seeds:
        t0 = time.perf_counter()
        m, model, loss, manifest = run_single(cfg, s)
        log.info("%s seed=%d asr=%.1f ba=%.1f cad=%.1f (%.0fs)", cfg.name, s, m.asr, m.ba, m.cad, time.perf_counter() - t0)
        runs.append(m)
        losses.append(loss)
        manifests.append(manifest)
        if keep_models:
            models.append(model)
    asr = np.array([m.asr for m in runs])
    return ExperimentResult(
        runs=runs,
        asr_mean=float(asr.mean()),
        asr_std=float(asr.std()),
        ba_mean=float(np.mean([m.ba for m in runs])),
        cad_mean=float(np.mean([m.cad for m in runs])),
        clean_ba_mean=float(np.mean([m.ba + m.cad for m in runs])),
        models=models,
        losses=losses,
        manifests=manifests,
    )


def metrics_rows(cfg: ExperimentConfig, result: ExperimentResult) -> list[list]:
    """Rows in :data:`METRICS_HEADER` order: one per repeat plus a ``mean`` row."""
    mcfg = cfg.effective_model()
    spec = cfg.poison.spec
    base = [cfg.name, spec.family, spec.mode, _fmt(cfg.poison.rate), mcfg.l, mcfg.k, mcfg.n]
    rows = [base + [m.seed, _fmt(m.asr), _fmt(m.ba), _fmt(m.cad)] for m in result.runs]
    rows.append(base + ["mean", _fmt(result.asr_mean), _fmt(result.ba_mean), _fmt(result.cad_mean)])
    return rows


def _fmt(v: float) -> str:
    return f"{v:.4f}".rstrip("0").rstrip(".") if math.isfinite(v) else str(v)


def write_csv(path: str | os.PathLike, header: list[str], rows: Iterable[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


@dataclass
class SweepCell:
    l: int
    badpatch_count: int
    result: ExperimentResult

    @property
    def matched(self) -> bool:
        return self.l == self.badpatch_count


def sweep_l(cfg: ExperimentConfig, l_values: Iterable[int], badpatch_counts: Iterable[int]) -> list[SweepCell]:
    """Cross product of routing ``l`` and trigger tiling count.

    Matched cells (``l == count``) form the diagonal table, the rest the
    mismatch table; each cell is one run_experiment.
    """
    counts = list(badpatch_counts)
    cells = []
    for l in l_values:
        for count in counts:
            spec = dataclasses.replace(cfg.poison.spec, mode="badpatches", badpatch_count=count)
            sub = dataclasses.replace(
                cfg,
                poison=dataclasses.replace(cfg.poison, spec=spec),
                routing_l_override=l,
                name=f"{cfg.name}/l{l}-bp{count}",
            )
            cells.append(SweepCell(l, count, run_experiment(sub)))
    return cells


def loss_rows(losses: list[float]) -> list[list]:
    """Rows for the per-epoch ``epoch,loss`` log."""
    return [[i, repr(float(v))] for i, v in enumerate(losses)]


SWEEP_HEADER = ["table", "l", "badpatch_count", "asr", "asr_std", "ba", "cad"]


def sweep_rows(cells: list[SweepCell]) -> list[list]:
    rows = []
    for table in ("matched", "mismatched"):
        for c in cells:
            if c.matched == (table == "matched"):
                r = c.result
                rows.append([table, c.l, c.badpatch_count, _fmt(r.asr_mean), _fmt(r.asr_std), _fmt(r.ba_mean), _fmt(r.cad_mean)])
    return rows
