"""SplitMix64 as a counter-based generator.

Output ``i`` (0-based) of the stream seeded with ``s`` is
``mix64(s + (i + 1) * 0x9E3779B97F4A7C15 mod 2**64)``, identical to the
``i+1``-th call of the reference sequential SplitMix64, so any language with
64-bit unsigned arithmetic reproduces it.

Floats are built from the top 24 bits: ``u = (x >> 40) / 2**24`` in [0, 1),
then ``2u - 1`` in [-1, 1), both exact in f32.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, n: int, start: int = 0) -> np.ndarray:
    """Outputs ``start .. start+n-1`` of the stream seeded with ``seed``."""
    counters = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = np.uint64(seed & _MASK) + counters * np.uint64(GAMMA)
        return mix64(state)


def uniform_pm1(seed: int, n: int) -> np.ndarray:
    """``n`` f32 values uniform on [-1, 1) from the top 24 bits of each output."""
    bits = splitmix64(seed, n) >> np.uint64(40)
    return (bits.astype(np.float64) * 2.0**-23 - 1.0).astype(np.float32)


def derive_key(seed: int, index: int) -> int:
    """Sub-stream key: output ``index`` of the stream seeded with ``seed``."""
    return int(splitmix64(seed, 1, start=index)[0])
