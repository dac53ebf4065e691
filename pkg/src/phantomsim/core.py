"""Dense double-precision building blocks shared by every execution mode.

Matrices are plain float64 numpy arrays with batch samples stored as
columns, so the per-sample math applies column-wise without reshaping.
"""

from __future__ import annotations

import math
import zlib
from enum import Enum

import numpy as np

from .errors import ConfigurationError


class FlopCounter:
    """Running count of floating point operations.

    Convention (kept deliberately simple so the count is auditable):
    a matrix product contributes 2*m*n*k, every elementwise pass
    (bias add, activation, accumulation, reduction) contributes one
    operation per element it touches.
    """

    __slots__ = ("total",)

    def __init__(self) -> None:
        self.total = 0

    def add(self, flops: int) -> None:
        self.total += int(flops)

    def reset(self) -> None:
        self.total = 0


def gemm(a, b, transpose_a: bool = False, transpose_b: bool = False,
         counter: FlopCounter | None = None) -> np.ndarray:
    """Dense product of (a or a.T) with (b or b.T).

    Reports 2*m*n*k to ``counter`` when one is supplied. Dimension
    mismatches and non-finite results are fatal configuration errors.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    left = a.T if transpose_a else a
    right = b.T if transpose_b else b
    if left.ndim != 2 or right.ndim != 2:
        raise ConfigurationError("gemm expects 2-d operands")
    if left.shape[1] != right.shape[0]:
        raise ConfigurationError(
            f"gemm dimension mismatch: {left.shape} x {right.shape}")
    with np.errstate(over="ignore", invalid="ignore"):  # checked explicitly below
        out = left @ right
    if counter is not None:
        counter.add(2 * left.shape[0] * left.shape[1] * right.shape[1])
    if not np.all(np.isfinite(out)):
        raise ConfigurationError("gemm produced non-finite values")
    return out


class Activation(Enum):
    """Elementwise nonlinearity paired with its derivative.

    ReLU uses the subgradient convention grad(0) = 0; numeric gradient
    checks must therefore perturb away from the kink.
    """

    RELU = "relu"
    IDENTITY = "identity"

    def apply(self, z: np.ndarray) -> np.ndarray:
        if self is Activation.RELU:
            return np.maximum(z, 0.0)
        return np.array(z, dtype=np.float64, copy=True)

    def grad(self, pre: np.ndarray) -> np.ndarray:
        if self is Activation.RELU:
            return np.where(pre > 0, 1.0, 0.0)
        return np.ones_like(np.asarray(pre, dtype=np.float64))


def apply_activation(z, act: Activation, counter: FlopCounter | None = None) -> np.ndarray:
    """Elementwise sigma(z); one FLOP per element."""
    out = act.apply(np.asarray(z, dtype=np.float64))
    if counter is not None:
        counter.add(out.size)
    return out


def activation_grad(pre, act: Activation, counter: FlopCounter | None = None) -> np.ndarray:
    """Elementwise sigma'(pre) evaluated at pre-activation values."""
    out = act.grad(np.asarray(pre, dtype=np.float64))
    if counter is not None:
        counter.add(out.size)
    return out


def _key_part(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def substream(seed: int, *key) -> np.random.Generator:
    """Independent reproducible random stream keyed by (seed, *key).

    Built on the Philox counter-based generator so a given key always
    yields the same values regardless of world layout, scheduler mode or
    call order. Keys mix strings and small integers.
    """
    ss = np.random.SeedSequence(
        entropy=int(seed) & (2**63 - 1),
        spawn_key=tuple(_key_part(p) for p in key),
    )
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, dtype=np.uint64)))


def uniform_init(rng: np.random.Generator, rows: int, cols: int,
                 fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform [-s, s] init with s = sqrt(6 / (fan_in + fan_out))."""
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(rows, cols))
