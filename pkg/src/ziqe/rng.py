"""SplitMix64, a 64-bit-state counter PRNG with a fixed published algorithm.

Draw ``i`` (counting from 1) of a stream seeded with ``s`` is
``mix(s + i * 0x9E3779B97F4A7C15)`` where ``mix`` is the SplitMix64 finaliser
(Steele, Lea & Flood 2014).  Because each draw depends only on the seed and
its index, batches are generated vectorised and produce the same numbers on
every platform.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * _GOLDEN
            out = _mix(z)
        self.state = (self.state + n * int(_GOLDEN)) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) from the top 53 bits of each draw."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """``n`` integers in ``[low, high)``."""
        if high <= low:
            raise ValueError("empty integer range")
        return low + np.floor(self.uniform(n) * (high - low)).astype(np.int64)
