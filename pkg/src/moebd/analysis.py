"""Routing maps, per-expert patch intensity histograms and routing overlap."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from . import netpbm, pmoe
from .patching import GeometryError, PatchGrid, split_patches
from .pmoe import PmoeModel, RoutingTrace

DEFAULT_BINS = 32


class ConfigError(ValueError):
    """Two models disagree on their routing geometry."""


def _gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    return img.mean(axis=2, dtype=np.float32) if img.ndim == 3 else img


def trace_from_json(doc: dict, l: int) -> RoutingTrace:
    experts = sorted(doc["experts"], key=lambda e: e["index"])
    idx = np.array([e["patches"] for e in experts], dtype=np.int64)
    sc = np.array([e["scores"] for e in experts], dtype=np.float32)
    return RoutingTrace(idx, sc, l)


def render_mask(image: np.ndarray, patches, l: int) -> np.ndarray:
    """Grayscale image with every patch outside ``patches`` painted white."""
    gray = _gray(image)
    h, w = gray.shape
    g = PatchGrid.for_image(h, w, l)
    out = np.ones_like(gray)
    for p in patches:
        r, c = g.position(int(p))
        ys, xs = r * g.patch_h, c * g.patch_w
        out[ys : ys + g.patch_h, xs : xs + g.patch_w] = gray[ys : ys + g.patch_h, xs : xs + g.patch_w]
    return out


def export_routing_maps(model: PmoeModel, image: np.ndarray, out_dir: str | os.PathLike) -> list[Path]:
    """Write ``expert_<e>.pgm`` per expert plus ``trace.json``; returns the paths written."""
    _, trace = pmoe.forward(model, image)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for e, sel in enumerate(trace.indices):
        p = out / f"expert_{e}.pgm"
        netpbm.write_image(p, render_mask(image, sel, model.config.l))
        paths.append(p)
    p = out / "trace.json"
    p.write_text(json.dumps(trace.to_json(), indent=1) + "\n")
    paths.append(p)
    return paths


def patch_means(image: np.ndarray, l: int) -> np.ndarray:
    """Mean intensity on the 0..255 scale of every patch, shape ``(l,)``."""
    patches = split_patches(image, l)
    return patches.reshape(l, -1).mean(axis=1, dtype=np.float64) * 255.0


def patch_intensity_histogram(image: np.ndarray, trace: RoutingTrace, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Per-expert counts ``(n, bins)`` of selected-patch mean intensity over [0, 255]."""
    if trace.l < 1:
        raise GeometryError("trace carries no patch count")
    means = patch_means(image, trace.l)
    edges = np.linspace(0.0, 255.0, bins + 1)
    return np.stack([np.histogram(means[sel], bins=edges)[0] for sel in trace.indices])


def compare_routing(model_a: PmoeModel, model_b: PmoeModel, image: np.ndarray) -> np.ndarray:
    """Jaccard index of each expert's selected patch set under the two models."""
    ca, cb = model_a.config, model_b.config
    if (ca.l, ca.k, ca.n) != (cb.l, cb.k, cb.n):
        raise ConfigError(f"routing geometry differs: {(ca.l, ca.k, ca.n)} vs {(cb.l, cb.k, cb.n)}")
    _, ta = pmoe.forward(model_a, image)
    _, tb = pmoe.forward(model_b, image)
    return jaccard(ta.indices, tb.indices)


def jaccard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty(len(a))
    for e, (x, y) in enumerate(zip(a, b)):
        sx, sy = set(x.tolist()), set(y.tolist())
        union = sx | sy
        out[e] = len(sx & sy) / len(union) if union else 1.0
    return out


def patch_selection_count(model: PmoeModel, images: np.ndarray, patch: int = 0) -> int:
    """Expert selections of ``patch`` summed over experts and images."""
    x = model.patches(images)
    idx, _ = pmoe.select(model, x)
    return int(np.count_nonzero(idx == patch))


def histogram_rows(hist: np.ndarray) -> list[list]:
    """CSV rows ``expert,bin,lo,hi,count``."""
    bins = hist.shape[1]
    edges = np.linspace(0.0, 255.0, bins + 1)
    return [[e, b, f"{edges[b]:g}", f"{edges[b + 1]:g}", int(hist[e, b])] for e in range(len(hist)) for b in range(bins)]
