"""Portable seeded randomness.

Every random draw in the package comes from a SplitMix64 stream.  The
stream is counter based: draw ``i`` (1-based) from a stream with state
``s`` is ``mix64(s + i * GAMMA mod 2**64)``, so a block of draws can be
computed with vectorised uint64 arithmetic and reproduced by any language.

``mix64(z)``::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)

Derived values:

* float64 in [0, 1): ``(u >> 11) * 2**-53``
* float32 in [0, 1): ``(u >> 40) * 2**-24``
* normal: Box-Muller on two float64 uniforms ``u1, u2`` drawn as
  consecutive pairs, ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``
* permutation of n: stable argsort of n consecutive raw draws

Child seeds come from :func:`derive_seed`.
"""

from __future__ import annotations

import hashlib

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def derive_seed(parent: int, name: str) -> int:
    """``hash64(parent, name)``: first 8 bytes (little endian) of
    BLAKE2b-64 over ``parent`` as 8 little-endian bytes followed by the
    UTF-8 bytes of ``name``."""
    payload = (parent & MASK64).to_bytes(8, "little") + name.encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def spawn(self, name: str) -> "SplitMix64":
        return SplitMix64(derive_seed(self.state, name))

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GAMMA)
            out = mix64(states)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def random(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def random32(self, n: int) -> np.ndarray:
        return ((self.next_u64(n) >> np.uint64(40)).astype(np.float64) * 2.0**-24).astype(np.float32)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        size = int(np.prod(shape)) if shape != () else 1
        return (low + (high - low) * self.random(size)).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        size = int(np.prod(shape)) if shape != () else 1
        u = self.random(2 * size)
        u1, u2 = u[0::2], u[1::2]
        return (np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2 * np.pi * u2)).reshape(shape)

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` draws from ``range(high)`` as ``floor(float64 * high)``."""
        return np.minimum((self.random(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.next_u64(n), kind="stable")

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices from ``range(n)``: prefix of a permutation."""
        if size > n:
            raise ValueError(f"cannot choose {size} of {n}")
        return self.permutation(n)[:size]
