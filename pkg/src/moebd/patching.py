"""Split images into the square l-patch grid and put them back together.

Patches are indexed row-major: ``index = row * side + col``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Image, patch or trigger dimensions are inconsistent."""


@dataclass(frozen=True)
class PatchGrid:
    l: int
    side: int
    patch_h: int
    patch_w: int

    @classmethod
    def for_image(cls, h: int, w: int, l: int) -> "PatchGrid":
        side = math.isqrt(l) if l > 0 else 0
        if l < 1 or side * side != l:
            raise GeometryError(f"l={l} is not a perfect square")
        if h % side or w % side:
            raise GeometryError(f"{h}x{w} image not divisible into a {side}x{side} grid")
        return cls(l, side, h // side, w // side)

    def position(self, index: int) -> tuple[int, int]:
        return divmod(index, self.side)


def _as_hwc(image: np.ndarray) -> np.ndarray:
    if image.ndim == 2:
        return image[:, :, None]
    if image.ndim != 3:
        raise GeometryError(f"expected HxW or HxWxC image, got shape {image.shape}")
    return image


def split_patches(image: np.ndarray, l: int) -> np.ndarray:
    """Return an ``(l, patch_h, patch_w, C)`` array of patches in row-major order."""
    img = _as_hwc(np.asarray(image))
    h, w, c = img.shape
    g = PatchGrid.for_image(h, w, l)
    blocks = img.reshape(g.side, g.patch_h, g.side, g.patch_w, c).swapaxes(1, 2)
    return blocks.reshape(l, g.patch_h, g.patch_w, c).copy()


def split_batch(images: np.ndarray, l: int) -> np.ndarray:
    """Batched split: ``(N, H, W, C)`` -> ``(N, l, patch_h * patch_w * C)``."""
    n, h, w, c = images.shape
    g = PatchGrid.for_image(h, w, l)
    blocks = images.reshape(n, g.side, g.patch_h, g.side, g.patch_w, c).swapaxes(2, 3)
    return blocks.reshape(n, l, g.patch_h * g.patch_w * c)


def assemble_patches(patches, l: int) -> np.ndarray:
    """Inverse of :func:`split_patches`; always returns an HxWxC array."""
    try:
        arr = np.asarray(patches)
    except ValueError:
        raise GeometryError("patches differ in size") from None
    if arr.dtype == object:
        raise GeometryError("patches differ in size")
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4 or arr.shape[0] != l:
        raise GeometryError(f"expected {l} patches of equal size, got shape {arr.shape}")
    side = math.isqrt(l)
    if side * side != l:
        raise GeometryError(f"l={l} is not a perfect square")
    _, ph, pw, c = arr.shape
    out = arr.reshape(side, side, ph, pw, c).swapaxes(1, 2)
    return out.reshape(side * ph, side * pw, c).copy()
