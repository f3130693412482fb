"""Tensor helpers shared by every other module.

Tensors are plain ``numpy.ndarray`` values in float64, laid out
(batch, channel, row, column). This module adds the norms the pruning
scores need and a counter-based, seedable random source.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(data, shape=None) -> np.ndarray:
    t = np.ascontiguousarray(data, dtype=DTYPE)
    if shape is not None:
        t = t.reshape(shape)
    return t


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


def l1_norm(t) -> float:
    return float(np.sum(np.abs(t)))


def l2_norm(t) -> float:
    t = np.asarray(t, dtype=DTYPE)
    return float(np.sqrt(np.sum(t * t)))


def _check_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(d) for d in shape)
    if any(d <= 0 for d in shape):
        raise ValueError(f"dimensions must be positive, got {shape}")
    return shape


class Rng:
    """Seeded random source backed by the Philox counter-based generator.

    Same seed and same call sequence give bit-identical draws on any
    platform numpy supports.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape, mean=0.0, stddev=1.0) -> np.ndarray:
        return rand_normal(self, shape, mean, stddev)

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        shape = _check_shape(shape)
        return self._gen.uniform(low, high, size=shape).astype(DTYPE)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream; used to give each component its own RNG."""
        return Rng((self.seed * 1_000_003 + int(key)) % (2**63))


def rand_normal(rng: Rng, shape, mean=0.0, stddev=1.0) -> np.ndarray:
    if stddev < 0:
        raise ValueError("stddev must be >= 0")
    shape = _check_shape(shape)
    if stddev == 0:
        return np.full(shape, mean, dtype=DTYPE)
    return rng._gen.normal(mean, stddev, size=shape).astype(DTYPE)
