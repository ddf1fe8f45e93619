"""Deterministic random streams built on splitmix64.

Weight initialization must be reproducible bit-for-bit from an integer seed
alone, independent of numpy's global RNG state or version-specific generator
internals.  splitmix64 is counter-based, so any block of the stream can be
produced vectorized without stepping through predecessors.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64(value: int) -> int:
    """One splitmix64 output for a single 64-bit input."""
    with np.errstate(over="ignore"):
        z = (np.uint64(value & 0xFFFFFFFFFFFFFFFF) + _GOLDEN) & _MASK
    return int(_mix(z))


class SplitMix64:
    """A seekable splitmix64 stream yielding doubles in [0, 1)."""

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def next_doubles(self, count: int) -> np.ndarray:
        """The next `count` stream values as float64 in [0, 1)."""
        idx = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        self.counter += count
        with np.errstate(over="ignore"):
            z = _mix(self.seed + idx * _GOLDEN)
        # 53 high bits -> uniform double in [0, 1)
        return (z >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def uniform(self, low: float, high: float, shape: tuple[int, ...]) -> np.ndarray:
        """float32 array of the given shape, uniform on [low, high)."""
        n = int(np.prod(shape)) if shape else 1
        u = self.next_doubles(n)
        return (low + u * (high - low)).astype(np.float32).reshape(shape)


def derive_index(seed: int, step: int, slot: int, n: int) -> int:
    """Deterministic data-sampling index for a given step/slot.

    Stateless in the trainer: resuming from a checkpoint at any step
    reproduces the same sample order as an uninterrupted run.
    """
    if n <= 0:
        raise ValueError("empty data source")
    h = splitmix64(seed)
    h = splitmix64(h ^ (step * 0x100000001B3))
    h = splitmix64(h ^ slot)
    return h % n
