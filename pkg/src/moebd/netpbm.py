"""Binary PGM (P5) / PPM (P6) with maxval 255.

Intensities are quantised as ``q = round(v * 255)`` on write and mapped
back as ``v = q / 255`` on read, so write(read(f)) reproduces the file and
read(write(img)) reproduces any already-quantised image.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """Header is malformed or uses an unsupported variant."""


def quantize(image: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).astype(np.float32)) / np.float32(255)


def encode(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode image of shape {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = img.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + q.tobytes()


def decode(data: bytes) -> np.ndarray:
    """Parse P5/P6 bytes to float32 ``HxW`` (P5) or ``HxWx3`` (P6)."""
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("truncated header")
        tokens.append(data[start:pos])
    if pos >= n or not data[pos : pos + 1].isspace():
        raise ParseError("missing whitespace after maxval")
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(f"non-numeric header fields {tokens[1:]!r}") from None
    if maxval != 255:
        raise ParseError(f"maxval {maxval} unsupported (need 255)")
    if w < 1 or h < 1:
        raise ParseError(f"bad dimensions {w}x{h}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise OSError(f"truncated payload: {len(payload)} of {need} bytes")
    q = np.frombuffer(payload, dtype=np.uint8)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return q.reshape(shape).astype(np.float32) / np.float32(255)


def read_image(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode(image))
