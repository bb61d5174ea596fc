"""Synthetic motif dataset, dirty-label poisoning and on-disk manifests."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np

from . import netpbm
from .patching import GeometryError
from .rng import SplitMix64
from .triggers import TriggerSpec, apply_trigger_batch

MOTIFS = (
    "disc",
    "ring",
    "bar",
    "cross",
    "checker",
    "gradient",
    "two_blob",
    "corner_wedge",
    "stripes",
    "diamond",
)
NOISE_SIGMA = 0.05


class CapacityError(ValueError):
    """Not enough samples to satisfy the request."""


@dataclass
class LabeledImage:
    image: np.ndarray
    label: int
    id: int


@dataclass
class Dataset:
    """Images ``(N, H, W, C)`` float32 in [0, 1], integer labels and stable ids."""

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]), int(self.ids[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.ids[idx], self.num_classes)

    def copy(self) -> "Dataset":
        return Dataset(self.images.copy(), self.labels.copy(), self.ids.copy(), self.num_classes)


@dataclass
class PoisonConfig:
    rate: float
    spec: TriggerSpec
    target_label: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"poison rate must lie in [0, 1], got {self.rate}")


@dataclass
class PoisonManifest:
    entries: list[tuple[int, int]] = field(default_factory=list)  # (id, original_label)

    @property
    def count(self) -> int:
        return len(self.entries)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "original_label"])
            w.writerows(self.entries)


def poison_count(rate: float, n: int) -> int:
    """``floor(rate * n)`` evaluated on the decimal form of ``rate``."""
    return math.floor(Decimal(repr(float(rate))) * n)


# ---------------------------------------------------------------------------
# synthetic generation


def _motif_mask(kind: str, yy, xx, cy, cx, sc, h, w) -> np.ndarray:
    """Weight in [0, 1] of the foreground colour, broadcast to ``(N, H, W)``."""
    u = h / 32.0  # motif sizes are specified for 32x32 and scale with the image
    dy = yy - cy
    dx = xx - cx
    r = np.sqrt(dy**2 + dx**2)
    s = sc * u
    if kind == "disc":
        m = r <= 7 * s
    elif kind == "ring":
        m = np.abs(r - 9 * s) <= 1.6 * s
    elif kind == "bar":
        m = (np.abs(dy) <= 3 * s) & (np.abs(dx) <= 11 * s)
    elif kind == "cross":
        m = ((np.abs(dy) <= 1.5 * s) & (np.abs(dx) <= 11 * s)) | ((np.abs(dx) <= 1.5 * s) & (np.abs(dy) <= 11 * s))
    elif kind == "checker":
        m = (np.floor(dy / (4 * s)) + np.floor(dx / (4 * s))) % 2 == 0
    elif kind == "gradient":
        return np.clip(0.5 + dx / w + dy / (2 * h), 0.0, 1.0)
    elif kind == "two_blob":
        m = (np.sqrt(dy**2 + (dx - 8 * s) ** 2) <= 4 * s) | (np.sqrt(dy**2 + (dx + 8 * s) ** 2) <= 4 * s)
    elif kind == "corner_wedge":
        m = dy + dx >= 6 * s
    elif kind == "stripes":
        m = np.floor(dx / (3 * s)) % 2 == 0
    elif kind == "diamond":
        m = np.abs(dy) + np.abs(dx) <= 9 * s
    else:
        raise ValueError(kind)
    return m.astype(np.float64)


def _draw_class(rng: SplitMix64, kind: str, n: int, h: int, w: int, c: int) -> np.ndarray:
    if n == 0:
        return np.zeros((0, h, w, c), dtype=np.float32)
    cy = h / 2 - 0.5 + rng.uniform(-4, 4, (n,)) * h / 32
    cx = w / 2 - 0.5 + rng.uniform(-4, 4, (n,)) * w / 32
    sc = rng.uniform(0.8, 1.2, (n,))
    # light motifs on a mid-grey background: nothing natural is near black
    bg = rng.uniform(0.35, 0.6, (n, c))
    fg = bg + rng.uniform(0.25, 0.4, (n, c))
    noise = rng.normal((n, h, w, c)) * NOISE_SIGMA
    yy = np.arange(h, dtype=np.float64)[None, :, None]
    xx = np.arange(w, dtype=np.float64)[None, None, :]
    m = _motif_mask(kind, yy, xx, cy[:, None, None], cx[:, None, None], sc[:, None, None], h, w)
    img = bg[:, None, None, :] + m[..., None] * (fg - bg)[:, None, None, :] + noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(
    num_classes: int,
    per_class: int,
    h: int = 32,
    w: int = 32,
    seed: int = 0,
    test_per_class: int | None = None,
    channels: int = 3,
) -> tuple[Dataset, Dataset]:
    """Train and test splits, one geometric motif per class.

    ``test_per_class`` defaults to ``per_class // 5``.  Train and test draw
    from independent streams derived from ``seed``.
    """
    if h % 8 or w % 8 or h < 8 or w < 8:
        raise GeometryError(f"synthetic images need dims divisible by 8, got {h}x{w}")
    if not 1 <= num_classes <= len(MOTIFS):
        raise ValueError(f"num_classes must be in 1..{len(MOTIFS)}")
    if test_per_class is None:
        test_per_class = per_class // 5
    root = SplitMix64(seed)
    splits = []
    offset = 0
    for name, count in (("train", per_class), ("test", test_per_class)):
        imgs, labels = [], []
        for k in range(num_classes):
            rng = root.spawn(f"{name}/{MOTIFS[k]}")
            imgs.append(_draw_class(rng, MOTIFS[k], count, h, w, channels))
            labels.append(np.full(count, k, dtype=np.int64))
        images = np.concatenate(imgs)
        n = len(images)
        splits.append(Dataset(images, np.concatenate(labels), np.arange(offset, offset + n, dtype=np.int64), num_classes))
        offset += n
    return splits[0], splits[1]


# ---------------------------------------------------------------------------
# poisoning


def select_poison_indices(train: Dataset, cfg: PoisonConfig) -> np.ndarray:
    """Uniform sample, without replacement, of ``floor(rate * N)`` non-target samples."""
    count = poison_count(cfg.rate, len(train))
    pool = np.flatnonzero(train.labels != cfg.target_label)
    if count > len(pool):
        raise CapacityError(f"need {count} non-target samples, only {len(pool)} available")
    pick = SplitMix64(cfg.seed).spawn("poison-select").choice(len(pool), count)
    return np.sort(pool[pick])


def poison_dataset(train: Dataset, cfg: PoisonConfig, l: int) -> tuple[Dataset, PoisonManifest]:
    """Replace the selected samples by triggered, relabelled copies."""
    idx = select_poison_indices(train, cfg)
    out = train.copy()
    manifest = PoisonManifest([(int(train.ids[i]), int(train.labels[i])) for i in idx])
    if len(idx):
        out.images[idx] = apply_trigger_batch(train.images[idx], cfg.spec, l)
        out.labels[idx] = cfg.target_label
    return out, manifest


# ---------------------------------------------------------------------------
# disk layout


def write_dataset(out_dir: str | os.PathLike, splits: dict[str, Dataset]) -> Path:
    """Write every image as PGM/PPM plus ``manifest.csv`` (id,split,label,path)."""
    out = Path(out_dir)
    out.mkdir(exist_ok=True)
    rows = []
    for split, ds in splits.items():
        sub = out / split
        sub.mkdir(exist_ok=True)
        ext = "ppm" if ds.images.shape[-1] == 3 else "pgm"
        for i in range(len(ds)):
            rel = f"{split}/{int(ds.ids[i]):06d}.{ext}"
            netpbm.write_image(out / rel, ds.images[i])
            rows.append((int(ds.ids[i]), split, int(ds.labels[i]), rel))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "split", "label", "path"])
        w.writerows(rows)
    return manifest


def read_dataset(manifest: str | os.PathLike, split: str, num_classes: int | None = None) -> Dataset:
    root = Path(manifest).parent
    ids, labels, images = [], [], []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] != split:
                continue
            img = netpbm.read_image(root / row["path"])
            images.append(img if img.ndim == 3 else img[..., None])
            ids.append(int(row["id"]))
            labels.append(int(row["label"]))
    labels_arr = np.asarray(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else (int(labels_arr.max()) + 1 if len(labels) else 0)
    return Dataset(np.stack(images) if images else np.zeros((0, 0, 0, 0), np.float32), labels_arr, np.asarray(ids, dtype=np.int64), k)
