"""Dense float64 tensors and the few primitives the operators are built from.

Tensors are plain :class:`numpy.ndarray` objects of dtype float64 in C
(row-major, last index fastest) order. Every function here returns a fresh
array and never mutates its inputs.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = [
    "InvalidShapeError",
    "ConfigurationError",
    "SplitMix64",
    "as_tensor",
    "prng_fill",
    "softmax",
    "pad_spatial",
    "matmul",
]

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1
MAX_RANK = 6


class InvalidShapeError(ValueError):
    """Raised when tensor extents are invalid or incompatible."""


class ConfigurationError(ValueError):
    """Raised when operator parameters are inconsistent with each other."""


class SplitMix64:
    """Scalar SplitMix64 generator.

    The state is an explicit value; copying the object copies the stream.
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        """Uniform value in [-1, 1)."""
        u = (self.next_u64() >> 11) * 2.0**-53
        return 2.0 * u - 1.0


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= MAX_RANK:
        raise InvalidShapeError(f"rank must be in [1, {MAX_RANK}], got {len(shape)}")
    if any(s < 1 for s in shape):
        raise InvalidShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def as_tensor(values, rank: int | None = None, name: str = "tensor") -> np.ndarray:
    """Convert ``values`` to a finite float64 C-ordered array.

    ``rank`` optionally pins the number of dimensions.
    """
    arr = np.array(values, dtype=np.float64, order="C")
    if rank is not None and arr.ndim != rank:
        raise InvalidShapeError(f"{name} must have rank {rank}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def prng_fill(shape: Sequence[int], seed: int) -> np.ndarray:
    """Tensor of the given shape filled row-major from SplitMix64(seed).

    Each raw output ``z`` maps to ``2 * ((z >> 11) * 2**-53) - 1``, so values
    lie in [-1, 1). The stream is generated vectorised: the k-th state is
    ``seed + k * golden`` modulo 2**64, which is exactly what the sequential
    generator produces.
    """
    shape = _check_shape(shape)
    n = int(np.prod(shape))
    with np.errstate(over="ignore"):
        k = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(seed & _MASK64) + k * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
    u = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return (2.0 * u - 1.0).reshape(shape)


def softmax(scores, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 0 or s.shape[axis] == 0:
        raise InvalidShapeError("softmax needs at least one score")
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def pad_spatial(x: np.ndarray, l: int) -> np.ndarray:
    """Zero-pad the two leading (spatial) axes of an H x W x D map by ``l``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise InvalidShapeError(f"feature map must be rank 3, got shape {x.shape}")
    if l < 0:
        raise InvalidShapeError(f"padding must be non-negative, got {l}")
    return np.pad(x, ((l, l), (l, l), (0, 0)))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b
