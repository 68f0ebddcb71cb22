"""Counter-based SplitMix64 random streams.

Every draw is computed from integer arithmetic only, so a seed produces the
same stream on every platform and numpy version. Normal variates use the
Irwin-Hall sum of twelve 32-bit uniforms, which is exact in float64 and never
touches libm.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *tags: int | str) -> int:
    """Hash ``seed`` and a tag path into a new 64-bit seed."""
    state = np.array([seed & MASK64], dtype=np.uint64)
    for tag in tags:
        if isinstance(tag, str):
            value = int.from_bytes(tag.encode("utf-8")[:8].ljust(8, b"\0"), "little")
            value ^= len(tag) << 56
        else:
            value = int(tag) & MASK64
        with np.errstate(over="ignore"):
            state = _mix(state ^ np.array([value], dtype=np.uint64)) + _GOLDEN
    return int(_mix(state)[0])


class Rng:
    """SplitMix64 stream: the i-th output is ``mix(seed + i * golden)``."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, size: int | tuple[int, ...]) -> np.ndarray:
        """Uniform floats in [0, 1) with 53 random bits."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        return ((self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53).reshape(shape)

    def normal(self, size: int | tuple[int, ...], std: float = 1.0) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.raw(12 * n) >> np.uint64(32)).astype(np.float64).reshape(n, 12)
        z = u.sum(axis=1) * 2.0**-32 - 6.0
        return (z * std).reshape(shape)

    def integers(self, low: int, high: int, size: int | None = None):
        """Integers in [low, high); returns a Python int when ``size`` is None."""
        span = high - low
        if span <= 0 or span >= 1 << 32:
            raise ValueError(f"invalid integer range [{low}, {high})")
        n = 1 if size is None else size
        top = self.raw(n) >> np.uint64(32)
        out = ((top * np.uint64(span)) >> np.uint64(32)).astype(np.int64) + low
        return int(out[0]) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.raw(n), kind="stable")

    def sample_distinct(self, pool: np.ndarray, k: int) -> np.ndarray:
        """Draw ``k`` distinct elements of ``pool`` in random order."""
        if k > len(pool):
            raise ValueError(f"cannot draw {k} distinct items from a pool of {len(pool)}")
        return np.asarray(pool)[self.permutation(len(pool))[:k]]

    def spawn(self, *tags: int | str) -> "Rng":
        return Rng(derive_seed(self.seed, *tags))
