"""Dense float64 arrays and the seeded random streams used across the package.

Tensors are plain ``numpy.ndarray`` objects with ``dtype=float64`` in C
(row-major) order; images are channels-first ``(C, H, W)`` and batches
``(N, C, H, W)``.  Randomness comes from numpy's Philox generator, a
counter-based bit generator whose stream is identical on every platform for
a given key.
"""
from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

DTYPE = np.float64
RNG_ALGORITHM = "philox4x64-10"


class NumericalError(ArithmeticError):
    """Raised when an operation produces NaN or Inf from finite inputs."""


def make_rng(seed: int, stream: str | None = None) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and an optional named sub-stream.

    Distinct stream names give statistically independent generators, so
    turning on one consumer of randomness never shifts another's draws.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = [int(seed)]
    if stream is not None:
        entropy.append(zlib.crc32(stream.encode("utf-8")))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not shape or any(d <= 0 for d in shape):
        raise ValueError(f"extents must be positive, got {shape}")
    return shape


def check_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite values in {what}")
    return a


def tensor_full(shape: Sequence[int], value: float) -> np.ndarray:
    return np.full(_check_shape(shape), float(value), dtype=DTYPE)


def tensor_gaussian(shape: Sequence[int], mean: float, std: float,
                    rng: np.random.Generator) -> np.ndarray:
    """I.i.d. normal samples; ``std == 0`` returns the constant ``mean``."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    shape = _check_shape(shape)
    return mean + std * rng.standard_normal(shape, dtype=DTYPE)


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Elementwise arithmetic with exact shapes (no broadcasting).

    ``scale`` and ``max_with_scalar`` take a scalar ``b``; ``neg`` and ``abs``
    are unary.
    """
    a = np.asarray(a, dtype=DTYPE)
    if op in _BINARY:
        b = np.asarray(b, dtype=DTYPE)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch for {op}: {a.shape} vs {b.shape}")
        return _BINARY[op](a, b)
    if op == "scale":
        return a * float(b)
    if op == "max_with_scalar":
        return np.maximum(a, float(b))
    if op == "neg":
        return -a
    if op == "abs":
        return np.abs(a)
    raise ValueError(f"unknown elementwise op {op!r}")


def reduce_sum(a) -> float:
    return float(np.sum(a, dtype=DTYPE))


def l2_norm(a) -> float:
    return float(np.sqrt(np.sum(np.square(a, dtype=DTYPE))))
