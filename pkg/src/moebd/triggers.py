"""Square, blend and warp triggers, applied once per image or tiled per patch."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Literal, Optional

import numpy as np

from .patching import GeometryError, PatchGrid
from .rng import SplitMix64

Family = Literal["square", "blend", "warp"]
Mode = Literal["routing_agnostic", "badpatches"]
FAMILIES = ("square", "blend", "warp")
MODES = ("routing_agnostic", "badpatches")


@dataclass
class TriggerSpec:
    family: Family
    mode: Mode = "routing_agnostic"
    size_px: int = 4
    anchor: tuple[int, int] = (0, 0)
    trigger_image: Optional[np.ndarray] = field(default=None, repr=False)
    alpha: float = 0.2
    k_w: int = 2
    s: float = 0.25
    seed: int = 0
    # conceptual patches tiled in badpatches mode; None means "use the model's l"
    badpatch_count: Optional[int] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown trigger family {self.family!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown trigger mode {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.s < 0:
            raise ValueError(f"warp strength must be >= 0, got {self.s}")
        if self.k_w < 2:
            raise ValueError(f"warp grid size must be >= 2, got {self.k_w}")
        if self.size_px < 1:
            raise ValueError(f"square size must be >= 1, got {self.size_px}")
        self.anchor = tuple(self.anchor)
        if self.family == "blend" and self.trigger_image is None:
            raise ValueError("blend trigger needs a trigger_image")


def apply_square(image: np.ndarray, size_px: int, anchor: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Black ``size_px`` x ``size_px`` square with its top-left corner at ``anchor``."""
    r, c = anchor
    h, w = image.shape[:2]
    if r < 0 or c < 0 or r + size_px > h or c + size_px > w:
        raise GeometryError(f"{size_px}px square at {anchor} does not fit {h}x{w}")
    out = image.copy()
    out[r : r + size_px, c : c + size_px] = 0
    return out


def apply_blend(image: np.ndarray, trigger_image: np.ndarray, alpha: float) -> np.ndarray:
    if image.shape != trigger_image.shape:
        raise GeometryError(f"blend shapes differ: {image.shape} vs {trigger_image.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    a = image.dtype.type(alpha)
    out = (1 - a) * image + a * trigger_image.astype(image.dtype, copy=False)
    return np.clip(out, 0, 1).astype(image.dtype, copy=False)


def make_blend_pattern(h: int, w: int, c: int = 3, seed: int = 0) -> np.ndarray:
    """Diagonal two-colour gradient, the default blend trigger image."""
    colors = SplitMix64(seed).random(2 * c).reshape(2, c)
    t = (np.arange(h)[:, None] / max(h - 1, 1) + np.arange(w)[None, :] / max(w - 1, 1)) / 2
    img = (1 - t)[..., None] * colors[0] + t[..., None] * colors[1]
    return img.astype(np.float32)


def _bilinear_upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a ``(kh, kw, C)`` grid to ``(h, w, C)``."""
    kh, kw = grid.shape[:2]
    ys = np.arange(h) * ((kh - 1) / (h - 1)) if h > 1 else np.zeros(1)
    xs = np.arange(w) * ((kw - 1) / (w - 1)) if w > 1 else np.zeros(1)
    y0 = np.minimum(np.floor(ys).astype(int), kh - 2)
    x0 = np.minimum(np.floor(xs).astype(int), kw - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    top = g00 + fx * (g01 - g00)
    bot = g10 + fx * (g11 - g10)
    return top + fy * (bot - top)


@lru_cache(maxsize=64)
def _warp_field_cached(k_w: int, s: float, h: int, w: int, seed: int) -> np.ndarray:
    control = SplitMix64(seed).uniform(-1.0, 1.0, (k_w, k_w, 2))
    control = control / np.mean(np.abs(control)) * s
    field_ = _bilinear_upsample(control, h, w)
    field_[..., 0] *= h / k_w
    field_[..., 1] *= w / k_w
    field_.setflags(write=False)
    return field_


def generate_warp_field(k_w: int, s: float, h: int, w: int, seed: int) -> np.ndarray:
    """Per-pixel ``(dy, dx)`` displacement in pixels, shape ``(h, w, 2)``."""
    if k_w < 2:
        raise ValueError(f"k_w must be >= 2, got {k_w}")
    if s < 0:
        raise ValueError(f"s must be >= 0, got {s}")
    return _warp_field_cached(int(k_w), float(s), int(h), int(w), int(seed)).copy()


def apply_warp(image: np.ndarray, field_: np.ndarray) -> np.ndarray:
    """Bilinear resample at ``(y + dy, x + dx)`` with clamp-to-edge coordinates.

    Accepts ``HxW``, ``HxWxC`` or a batch ``(..., H, W, C)``.
    """
    squeeze = image.ndim == 2
    img = image[..., None] if squeeze else image
    h, w = img.shape[-3:-1]
    if field_.shape != (h, w, 2):
        raise GeometryError(f"field {field_.shape} does not match image {image.shape}")
    yy = np.clip(np.arange(h)[:, None] + field_[..., 0], 0, h - 1)
    xx = np.clip(np.arange(w)[None, :] + field_[..., 1], 0, w - 1)
    y0 = np.floor(yy).astype(int)
    x0 = np.floor(xx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (yy - y0).astype(img.dtype)[..., None]
    fx = (xx - x0).astype(img.dtype)[..., None]
    i00, i01 = img[..., y0, x0, :], img[..., y0, x1, :]
    i10, i11 = img[..., y1, x0, :], img[..., y1, x1, :]
    # lerp form keeps integer coordinates and constant regions bit-exact
    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    out = np.clip(top + fy * (bot - top), 0, 1).astype(img.dtype, copy=False)
    return out[..., 0] if squeeze else out


def _nearest_resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = img.shape[:2]
    rows = (2 * np.arange(h) + 1) * sh // (2 * h)
    cols = (2 * np.arange(w) + 1) * sw // (2 * w)
    return img[rows][:, cols]


def _apply_once(images: np.ndarray, spec: TriggerSpec, badpatch: bool) -> np.ndarray:
    """Apply ``spec`` at full scale to a ``(..., h, w, C)`` stack."""
    h, w = images.shape[-3:-1]
    if spec.family == "square":
        r, c = (0, 0) if badpatch else spec.anchor
        size = spec.size_px
        if r < 0 or c < 0 or r + size > h or c + size > w:
            raise GeometryError(f"{size}px square at {(r, c)} does not fit {h}x{w}")
        out = images.copy()
        out[..., r : r + size, c : c + size, :] = 0
        return out
    if spec.family == "blend":
        trig = spec.trigger_image
        if trig.ndim == 2:
            trig = trig[..., None]
        if badpatch:
            trig = _nearest_resize(trig, h, w)
        if trig.shape != images.shape[-3:]:
            raise GeometryError(f"blend shapes differ: {images.shape[-3:]} vs {trig.shape}")
        a = images.dtype.type(spec.alpha)
        out = (1 - a) * images + a * trig.astype(images.dtype, copy=False)
        return np.clip(out, 0, 1).astype(images.dtype, copy=False)
    return apply_warp(images, generate_warp_field(spec.k_w, spec.s, h, w, spec.seed))


def apply_trigger_batch(images: np.ndarray, spec: TriggerSpec, l: int) -> np.ndarray:
    """Poison a stack of ``(N, H, W, C)`` images.

    Routing-agnostic mode applies the trigger once at image scale.  In
    BadPatches mode each image is cut into ``spec.badpatch_count`` (default
    ``l``) conceptual patches and the complete trigger goes into each one.
    """
    images = np.asarray(images)
    if spec.mode == "routing_agnostic":
        return _apply_once(images, spec, badpatch=False)
    count = spec.badpatch_count if spec.badpatch_count is not None else l
    n, h, w, c = images.shape
    g = PatchGrid.for_image(h, w, count)
    if spec.family == "square" and count > 1 and spec.size_px >= min(g.patch_h, g.patch_w):
        raise GeometryError(
            f"{spec.size_px}px square must be smaller than the {g.patch_h}x{g.patch_w} patch"
        )
    tiles = images.reshape(n, g.side, g.patch_h, g.side, g.patch_w, c).swapaxes(2, 3)
    out = _apply_once(tiles, spec, badpatch=True)
    return np.ascontiguousarray(out.swapaxes(2, 3)).reshape(n, h, w, c)


def apply_trigger(image: np.ndarray, spec: TriggerSpec, l: int) -> np.ndarray:
    """Poison a single ``HxW`` or ``HxWxC`` image; see :func:`apply_trigger_batch`."""
    img = np.asarray(image)
    squeeze = img.ndim == 2
    stack = (img[..., None] if squeeze else img)[None]
    out = apply_trigger_batch(stack, spec, l)[0]
    return out[..., 0] if squeeze else out
