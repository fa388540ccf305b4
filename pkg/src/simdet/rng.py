"""Counter-based SplitMix64 random streams.

Every draw is ``mix64(key + GAMMA * counter)``, so a stream is a pure
function of its key and position. Seeds for sub-streams (one per scene, per
layer, per epoch) come from :func:`derive`, which lets any item be
regenerated in isolation and keeps results independent of iteration order.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def derive(seed: int, *indices: int) -> int:
    """Child seed for a path of indices below ``seed``."""
    s = mix64(seed)
    for i in indices:
        s = mix64((s + GAMMA * ((i & MASK64) + 1)) & MASK64)
    return s


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_M1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class SplitMix:
    """Deterministic vectorized stream; platform-independent bit for bit."""

    def __init__(self, seed: int):
        self.key = seed & MASK64
        self.counter = 0

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GAMMA)
            return _mix64_array(z)

    def uniform(self, low: float = 0.0, high: float = 1.0, size: int | tuple[int, ...] = ()) -> np.ndarray | float:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        out = low + (high - low) * u
        return out.reshape(shape) if shape else float(out[0])

    def normal(self, size: int | tuple[int, ...], sigma: float = 1.0) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(size=m)  # (0, 1], keeps log finite
        u2 = self.uniform(size=m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return (sigma * z).reshape(shape)

    def integers(self, low: int, high: int, size: int | None = None) -> np.ndarray | int:
        """Integers in ``[low, high)``."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty range [{low}, {high})")
        vals = low + (self.u64(1 if size is None else size) % np.uint64(span)).astype(np.int64)
        return int(vals[0]) if size is None else vals

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.u64(n), kind="stable")

    def choice_weighted(self, weights: np.ndarray) -> int:
        cdf = np.cumsum(np.asarray(weights, dtype=np.float64))
        return int(np.searchsorted(cdf, self.uniform() * cdf[-1], side="right").clip(0, len(cdf) - 1))
