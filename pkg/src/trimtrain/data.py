"""Dataset ingestion: MNIST IDX files and a seeded synthetic instance stream."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .flops import FlopCounter
from .layers import softmax_cross_entropy
from .tensor_core import DTYPE, Rng

MNIST_MEAN = 0.1307
MNIST_STD = 0.3081

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803
_MAX_ITEMS = 1 << 31


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedError(IdxError):
    pass


class DimensionOverflowError(IdxError):
    pass


def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def load_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file (labels or images), gzip by extension."""
    with _open(path) as f:
        head = f.read(4)
        if len(head) < 4:
            raise TruncatedError(f"{path}: missing magic number")
        (magic,) = struct.unpack(">I", head)
        if magic not in (IDX_LABELS, IDX_IMAGES):
            raise BadMagicError(f"{path}: bad magic 0x{magic:08x}")
        ndim = magic & 0xFF
        raw = f.read(4 * ndim)
        if len(raw) < 4 * ndim:
            raise TruncatedError(f"{path}: truncated header")
        dims = struct.unpack(f">{ndim}I", raw)
        size = 1
        for d in dims:
            size *= d
            if size >= _MAX_ITEMS:
                raise DimensionOverflowError(f"{path}: dimensions {dims} too large")
        # read straight into the destination buffer, no intermediate copy
        out = np.empty(size, dtype=np.uint8)
        view = memoryview(out)
        got = 0
        while got < size:
            k = f.readinto(view[got:])
            if not k:
                break
            got += k
        if got != size:
            raise TruncatedError(f"{path}: expected {size} payload bytes, got {got}")
    return out.reshape(dims)


def write_idx(path, array) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise IdxError("only unsigned-byte payloads are supported")
    magic = (0x08 << 8) | array.ndim
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(array).tobytes())


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, 28, 28) float64
    labels: np.ndarray  # (N,) int64
    split: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split)


def normalize(raw: np.ndarray, mean: float = MNIST_MEAN, std: float = MNIST_STD) -> np.ndarray:
    """Bytes -> (pixel/255 - mean)/std, with a channel axis added."""
    x = (raw.astype(DTYPE) / 255.0 - mean) / std
    return x.reshape(x.shape[0], 1, *x.shape[1:])


def load_mnist(directory, split: str = "train") -> Dataset:
    prefix = "train" if split == "train" else "t10k"
    found = {}
    for kind in ("images-idx3", "labels-idx1"):
        for ext in ("-ubyte", "-ubyte.gz", ".ubyte", ".ubyte.gz"):
            p = os.path.join(directory, f"{prefix}-{kind}{ext}")
            if os.path.exists(p):
                found[kind] = p
                break
        else:
            raise FileNotFoundError(f"no {prefix}-{kind} file in {directory}")
    images = load_idx(found["images-idx3"])
    labels = load_idx(found["labels-idx1"]).astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise IdxError("MNIST labels must be in [0, 10)")
    return Dataset(normalize(images), labels, split)


def stratified_subset(labels, count: int, rng: Rng) -> np.ndarray:
    """Indices of a class-stratified random subset of ``count`` instances."""
    labels = np.asarray(labels)
    n = len(labels)
    if count >= n:
        return np.arange(n)
    classes, freq = np.unique(labels, return_counts=True)
    quota = np.floor(freq * count / n).astype(int)
    # hand out the remainder by largest fractional part, ties by class order
    frac = freq * count / n - quota
    for c in np.lexsort((classes, -frac))[: count - quota.sum()]:
        quota[c] += 1
    picked = []
    for c, q in zip(classes, quota):
        idx = np.flatnonzero(labels == c)
        picked.append(idx[rng.permutation(len(idx))[:q]])
    return np.sort(np.concatenate(picked))


# --------------------------------------------------------------------------
# synthetic stream


@dataclass
class SyntheticStream:
    """Images of class prototypes with per-instance signal strength.

    Easy instances carry the prototype at strength in [0.6, 1.0] times
    ``separation``; hard ones at [0, 0.3]. White noise of std ``noise`` is
    added. Prototypes are smooth (low-frequency) patterns of unit norm.
    """

    num_classes: int = 4
    size: int = 16
    separation: float = 6.0
    noise: float = 0.1
    hard_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise ValueError("hard_fraction must be in [0, 1]")
        rng = Rng(self.seed)
        coarse = rng.normal((self.num_classes, 4, 4))
        up = np.kron(coarse, np.ones((self.size // 4, self.size // 4)))
        up -= up.mean(axis=(1, 2), keepdims=True)
        up /= np.linalg.norm(up.reshape(self.num_classes, -1), axis=1)[:, None, None]
        self.prototypes = up
        self._rng = rng.spawn(1)

    @property
    def input_shape(self):
        return (1, self.size, self.size)

    def batch(self, m: int):
        """Next ``m`` instances: (x, y, hard_flag)."""
        rng = self._rng
        y = rng.integers(0, self.num_classes, size=m)
        hard = rng.uniform(m) < self.hard_fraction
        strength = np.where(hard, rng.uniform(m, 0.0, 0.3), rng.uniform(m, 0.6, 1.0))
        x = self.separation * strength[:, None, None] * self.prototypes[y]
        if self.noise > 0:
            x = x + rng.normal((m, self.size, self.size), 0.0, self.noise)
        return x[:, None].astype(DTYPE), y.astype(np.int64), hard

    def batches(self, m: int, count: int):
        for _ in range(count):
            yield self.batch(m)


def synth_stream(params: SyntheticStream, count: int, m: int = 128):
    return list(params.batches(m, count))


class PrototypeClassifier:
    """Fixed linear softmax model scoring inputs against the stream prototypes.

    Its per-instance loss is a known, stationary function of the input.
    """

    def __init__(self, stream: SyntheticStream, gain: float = 1.0):
        self.weight = gain * stream.prototypes.reshape(stream.num_classes, -1)

    def logits(self, x):
        return x.reshape(x.shape[0], -1) @ self.weight.T

    def instance_losses(self, x, y, ledger: Optional[FlopCounter] = None,
                        phase: str = "forward_main"):
        if ledger is not None:
            ledger.add(phase, x.shape[0] * self.weight.size, "oracle")
        losses, _, _ = softmax_cross_entropy(self.logits(x), y)
        return losses
