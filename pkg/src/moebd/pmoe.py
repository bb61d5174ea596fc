"""Patch-based mixture of experts.

Each expert owns a linear gate over flattened patches and independently
keeps its ``k`` highest-scoring patches (ties go to the lower patch index).
The kept patches pass through the expert's MLP and are combined with a
softmax over their gate scores; a linear head maps the concatenated expert
summaries to class logits.  Selection is discrete and receives no gradient.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .patching import GeometryError, PatchGrid, split_batch
from .rng import SplitMix64

# fixed input standardisation applied to every flattened patch
PIXEL_MEAN = np.float32(0.5)
PIXEL_SCALE = np.float32(4.0)

PARAM_NAMES = ("gate", "w1", "b1", "w2", "b2", "head_w", "head_b")
MAGIC = b"PMOE"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint bytes are not a readable PMOE container."""


@dataclass(frozen=True)
class ModelConfig:
    l: int = 64
    k: int = 16
    n: int = 4
    hidden: int = 64
    num_classes: int = 10
    # width of each expert's output vector fed to the head
    summary: int = 64

    def __post_init__(self):
        if not 1 <= self.k <= self.l:
            raise ValueError(f"need 1 <= k <= l, got k={self.k}, l={self.l}")
        if min(self.n, self.hidden, self.num_classes, self.summary) < 1:
            raise ValueError(f"invalid model config {self}")


def param_shapes(c: ModelConfig, patch_dim: int) -> dict[str, tuple[tuple[int, ...], int]]:
    """Shape and init fan-in of every parameter."""
    return {
        "gate": ((c.n, patch_dim), patch_dim),
        "w1": ((c.n, patch_dim, c.hidden), patch_dim),
        "b1": ((c.n, c.hidden), patch_dim),
        "w2": ((c.n, c.hidden, c.summary), c.hidden),
        "b2": ((c.n, c.summary), c.hidden),
        "head_w": ((c.n * c.summary, c.num_classes), c.n * c.summary),
        "head_b": ((c.num_classes,), c.n * c.summary),
    }


@dataclass
class RoutingTrace:
    """Selected patch indices and raw gate scores, one row per expert."""

    indices: np.ndarray  # (n, k) int64, descending score
    scores: np.ndarray  # (n, k) float32
    l: int = 0  # patch count of the routing grid

    def to_json(self) -> dict:
        return {
            "experts": [
                {"index": e, "patches": [int(i) for i in self.indices[e]], "scores": [float(s) for s in self.scores[e]]}
                for e in range(len(self.indices))
            ]
        }


class PmoeModel:
    def __init__(self, config: ModelConfig, patch_dim: int, seed: int = 0):
        self.config = config
        self.patch_dim = patch_dim
        c = config
        shapes = param_shapes(c, patch_dim)
        rng = SplitMix64(seed)
        self.params: dict[str, nx.Tensor] = {}
        for name in PARAM_NAMES:
            shape, fan_in = shapes[name]
            a = 1.0 / np.sqrt(fan_in)
            data = rng.spawn(name).uniform(-a, a, shape).astype(nx.DTYPE)
            self.params[name] = nx.Tensor(data, requires_grad=True, name=name)
        self.mask = np.ones((c.n, c.hidden), dtype=nx.DTYPE)

    # -- helpers ------------------------------------------------------------

    def __getitem__(self, name: str) -> nx.Tensor:
        return self.params[name]

    def param_list(self) -> list[nx.Tensor]:
        return [self.params[n] for n in PARAM_NAMES]

    def copy(self) -> "PmoeModel":
        other = PmoeModel.__new__(PmoeModel)
        other.config = self.config
        other.patch_dim = self.patch_dim
        other.params = {n: nx.Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.params.items()}
        other.mask = self.mask.copy()
        return other

    def patches(self, images: np.ndarray) -> np.ndarray:
        """Standardised patch features ``(B, l, P)`` for a batch of images."""
        images = np.asarray(images, dtype=nx.DTYPE)
        if images.ndim == 3:
            images = images[..., None]
        x = split_batch(images, self.config.l)
        if x.shape[-1] != self.patch_dim:
            raise GeometryError(f"patch dim {x.shape[-1]} != model patch dim {self.patch_dim}")
        return standardize(x)


def standardize(pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels, dtype=nx.DTYPE) - PIXEL_MEAN) * PIXEL_SCALE


def build_model(config: ModelConfig, image_shape: tuple[int, int, int], seed: int = 0) -> PmoeModel:
    h, w, c = image_shape
    g = PatchGrid.for_image(h, w, config.l)
    return PmoeModel(config, g.patch_h * g.patch_w * c, seed)


# ---------------------------------------------------------------------------
# routing


def gate_scores(x: np.ndarray, gate: np.ndarray) -> np.ndarray:
    """``(..., l, P) x (n, P) -> (..., l, n)``; float64 accumulation, float32 result."""
    return np.matmul(x.astype(np.float64), gate.astype(np.float64).T).astype(np.float32)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis, descending,
    ties broken toward the lower index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def route(patches, model: PmoeModel, e: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k selection of expert ``e`` over one image's patches."""
    flat = standardize(np.stack([np.asarray(p).reshape(-1) for p in patches]))
    if len(flat) != model.config.l:
        raise GeometryError(f"expected {model.config.l} patches, got {len(flat)}")
    scores = gate_scores(flat, model["gate"].data[e : e + 1])[:, 0]
    idx = top_k(scores, model.config.k)
    return idx, scores[idx]


def select(model: PmoeModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Routing for a patch batch ``(B, l, P)`` -> indices and scores ``(B, n, k)``."""
    s = np.swapaxes(gate_scores(x, model["gate"].data), 1, 2)  # (B, n, l)
    idx = top_k(s, model.config.k)
    return idx, np.take_along_axis(s, idx, axis=-1)


# ---------------------------------------------------------------------------
# forward / training


def _logits(model: PmoeModel, x: np.ndarray, idx: np.ndarray) -> nx.Tensor:
    c = model.config
    b = x.shape[0]
    p = model.patch_dim
    k = idx.shape[-1]
    picked = x[np.arange(b)[:, None, None], idx]  # (B, n, k, P)
    xs = np.ascontiguousarray(picked.transpose(1, 0, 2, 3)).reshape(c.n, b * k, p)

    prm = model.params
    score = nx.matmul(xs, nx.reshape(prm["gate"], (c.n, p, 1)), accumulate64=True)
    gates = nx.softmax(nx.reshape(score, (c.n, b, k)), axis=-1)
    hid = nx.relu(nx.add(nx.matmul(xs, prm["w1"]), nx.reshape(prm["b1"], (c.n, 1, c.hidden))))
    hid = nx.mul(hid, model.mask[:, None, :])
    out = nx.add(nx.matmul(hid, prm["w2"]), nx.reshape(prm["b2"], (c.n, 1, c.summary)))
    out = nx.reshape(out, (c.n, b, k, c.summary))
    summary = nx.sum(nx.mul(out, nx.reshape(gates, (c.n, b, k, 1))), axis=2)  # (n, B, S)
    head = nx.reshape(prm["head_w"], (c.n, c.summary, c.num_classes))
    logits = nx.sum(nx.matmul(summary, head), axis=0)
    return nx.add(logits, prm["head_b"])


def forward_batch(model: PmoeModel, images: np.ndarray, selection: np.ndarray | None = None):
    """Logits ``(B, C)`` plus selected indices and scores ``(B, n, k)``.

    ``selection`` pins the routing (used for gradient checks).
    """
    x = model.patches(images)
    idx, sc = select(model, x)
    if selection is not None:
        idx = np.asarray(selection)
        sc = np.take_along_axis(np.swapaxes(gate_scores(x, model["gate"].data), 1, 2), idx, axis=-1)
    return _logits(model, x, idx).data, idx, sc


def forward(model: PmoeModel, image: np.ndarray) -> tuple[np.ndarray, RoutingTrace]:
    logits, idx, sc = forward_batch(model, np.asarray(image)[None])
    return logits[0], RoutingTrace(idx[0], sc[0], model.config.l)


def loss_tensor(model: PmoeModel, images: np.ndarray, labels, selection: np.ndarray | None = None) -> nx.Tensor:
    x = model.patches(images)
    idx = selection if selection is not None else select(model, x)[0]
    return nx.cross_entropy(_logits(model, x, idx), labels)


def backward_step(model: PmoeModel, images: np.ndarray, labels, lr: float) -> float:
    """One SGD step on a batch; returns the pre-step loss."""
    if len(labels) == 0:
        raise ValueError("empty batch")
    params = model.param_list()
    for t in params:
        t.zero_grad()
    tape = nx.Tape()
    with nx.recording(tape):
        loss = loss_tensor(model, images, labels)
    tape.backward(loss)
    if lr != 0:
        nx.sgd_step([t.data for t in params], [t.grad for t in params], lr)
    return float(loss.data)


def predict_logits(model: PmoeModel, images: np.ndarray, batch: int = 500) -> np.ndarray:
    out = [forward_batch(model, images[i : i + batch])[0] for i in range(0, len(images), batch)]
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes), dtype=nx.DTYPE)


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Argmax along the last axis; ties resolve to the lower class index."""
    return np.argmax(logits, axis=-1)


def predict_batch(model: PmoeModel, images: np.ndarray) -> np.ndarray:
    return argmax_lowest(predict_logits(model, images))


def predict(model: PmoeModel, image: np.ndarray) -> int:
    return int(argmax_lowest(forward(model, image)[0]))


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little endian): b"PMOE", u32 version, u32 x6 config (l, k, n,
# hidden, num_classes, summary), then per parameter in PARAM_NAMES order: u32 ndim,
# u32 dims..., float32 data; finally u32 mask length and the mask as bytes.


def to_bytes(model: PmoeModel) -> bytes:
    c = model.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<7I", FORMAT_VERSION, c.l, c.k, c.n, c.hidden, c.num_classes, c.summary))
    for name in PARAM_NAMES:
        arr = model[name].data
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    m = model.mask.astype(np.uint8).reshape(-1)
    buf.write(struct.pack("<I", m.size))
    buf.write(m.tobytes())
    return buf.getvalue()


def from_bytes(data: bytes) -> PmoeModel:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic")
    view = memoryview(data)
    pos = 4

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    version, l, k, n, hidden, classes, summary = struct.unpack("<7I", take(28))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        cfg = ModelConfig(l, k, n, hidden, classes, summary)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    tensors = {}
    for name in PARAM_NAMES:
        (ndim,) = struct.unpack("<I", take(4))
        if ndim > 4:
            raise CheckpointError(f"bad rank {ndim} for {name}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(nx.DTYPE)
        tensors[name] = arr
    (mlen,) = struct.unpack("<I", take(4))
    mask = np.frombuffer(take(mlen), dtype=np.uint8)
    if mlen != n * hidden or np.any(mask > 1):
        raise CheckpointError("bad prune mask")
    model = PmoeModel.__new__(PmoeModel)
    model.config = cfg
    model.patch_dim = tensors["gate"].shape[1] if tensors["gate"].ndim == 2 else 0
    expected = {name: shape for name, (shape, _) in param_shapes(cfg, model.patch_dim).items()}
    for name, arr in tensors.items():
        if arr.shape != expected[name]:
            raise CheckpointError(f"{name} has shape {arr.shape}, expected {expected[name]}")
    model.params = {nm: nx.Tensor(arr.copy(), requires_grad=True, name=nm) for nm, arr in tensors.items()}
    model.mask = mask.reshape(n, hidden).astype(nx.DTYPE)
    return model


def save(model: PmoeModel, path: str | os.PathLike) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path: str | os.PathLike) -> PmoeModel:
    return from_bytes(Path(path).read_bytes())
