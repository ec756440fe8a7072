"""Deterministic dense-tensor arithmetic and a counter-based RNG.

Everything downstream (attention, DCT filtering, diffusion, training) builds
on the float64 operations here.  All functions are pure; randomness lives in
an explicit RngState whose (seed, counter) pair fully determines every draw.

RNG scheme
----------
Draw number ``c`` of a stream is a pure function of ``(seed, c)``:

    word(seed, p) = mix64(seed + (p + 1) * GOLDEN)          (splitmix64)
    u1 = ((word(seed, 2c) >> 11) + 1) * 2**-53              in (0, 1]
    u2 = (word(seed, 2c + 1) >> 11) * 2**-53                in [0, 1)
    normal = sqrt(-2 ln u1) * cos(2 pi u2)                  (Box-Muller)

Uniform/integer draws consume one counter tick each and use only the even
word.  Because draws are position-addressable, streams can be split with
``derive`` and replayed from any counter without touching global state.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO53 = float(1 << 53)


def _mix64(x: int) -> int:
    """SplitMix64 finalizer on a python int (mod 2**64)."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & _MASK64
    return x ^ (x >> 31)


def _words(seed: int, start: int, count: int) -> np.ndarray:
    """Vectorized word(seed, p) for p in [start, start+count)."""
    with np.errstate(over="ignore"):
        pos = np.arange(start, start + count, dtype=np.uint64)
        x = np.uint64(seed & _MASK64) + (pos + np.uint64(1)) * np.uint64(_GOLDEN)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(_MIX1)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(_MIX2)
        return x ^ (x >> np.uint64(31))


@dataclass
class RngState:
    """Counter-based RNG state; (seed, counter) determines all future draws."""

    seed: int
    counter: int = 0

    def normal(self, shape) -> np.ndarray:
        """I.i.d. standard normal draws; advances counter by the draw count."""
        n = int(np.prod(shape)) if np.ndim(shape) else int(shape)
        w = _words(self.seed, 2 * self.counter, 2 * n)
        u1 = ((w[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) / _TWO53
        u2 = (w[1::2] >> np.uint64(11)).astype(np.float64) / _TWO53
        self.counter += n
        out = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return out.reshape(shape)

    def uniform(self) -> float:
        """One draw in [0, 1); advances counter by one."""
        w = _words(self.seed, 2 * self.counter, 1)
        self.counter += 1
        return float((w[0] >> np.uint64(11)).astype(np.float64) / _TWO53)

    def randint(self, n: int) -> int:
        """One integer in [0, n); advances counter by one."""
        if n <= 0:
            raise ValueError(f"randint bound must be positive, got {n}")
        return int(self.uniform() * n)

    def derive(self, tag) -> "RngState":
        """Independent child stream named by `tag` (int or str), counter 0."""
        digest = hashlib.sha256(repr(tag).encode("utf-8")).digest()
        salt = int.from_bytes(digest[:8], "big")
        return RngState(seed=_mix64(self.seed ^ salt), counter=0)


def gaussian(shape, rng: RngState) -> np.ndarray:
    """Standard normal tensor of `shape` drawn from `rng` (advances counter)."""
    return rng.normal(shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rank-2 matrix product with shape validation.

    Raises ValueError naming both shapes when inner dimensions disagree.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with row-max subtraction for overflow stability."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def assert_all_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Raise FloatingPointError if `x` contains NaN or Inf."""
    if not np.isfinite(x).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return x
