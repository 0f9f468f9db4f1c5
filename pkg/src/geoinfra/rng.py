"""Deterministic random number generation.

Every stochastic decision in this package (weight init, shuffling, flips,
synthetic data) flows through :class:`RngState`, a splitmix64 generator.
splitmix64 is counter-based: output ``i`` is a fixed 64-bit mix of
``seed + (i+1) * GOLDEN_GAMMA``, so identical seeds give bit-identical
streams on every platform, independent of numpy's own RNG machinery.

Reference constants are the ones published with the original splitmix64
routine (Steele, Lea & Flood's SplittableRandom finalizer).
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix64(z: int) -> int:
    z = z & _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps; keep everything in uint64 to stay exact.
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


class RngState:
    """splitmix64 stream with vectorized draws.

    The state is a python int (never a numpy scalar, whose mixed-type
    arithmetic silently promotes to float64). Bulk draws advance the
    counter once per value, exactly as repeated scalar draws would.
    """

    def __init__(self, seed: int):
        self._state = int(seed) & _MASK

    @property
    def seed_state(self) -> int:
        return self._state

    def next_u64(self) -> int:
        self._state = (self._state + GOLDEN_GAMMA) & _MASK
        return _mix64(self._state)

    def u64_array(self, n: int) -> np.ndarray:
        counters = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA)
        counters += np.uint64(self._state)
        self._state = (self._state + n * GOLDEN_GAMMA) & _MASK
        return _mix64_array(counters)

    def split(self, stream: int) -> "RngState":
        """Derive an independent child stream; deterministic in (state, stream)."""
        return RngState(_mix64(self._state ^ _mix64(int(stream) ^ 0xD6E8FEB86659FD93)))

    # ---- distributions -------------------------------------------------

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray | float:
        """Uniform in [low, high) from the top 53 bits of each u64."""
        if size is None:
            u = (self.next_u64() >> 11) * 2.0**-53
            return low + (high - low) * u
        n = int(np.prod(size))
        u = (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(size)

    def normal(self, size=None) -> np.ndarray | float:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        scalar = size is None
        n = 1 if scalar else int(np.prod(size))
        m = (n + 1) // 2
        raw = self.u64_array(2 * m)
        # u1 in (0, 1] so log(u1) is finite
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        if scalar:
            return float(out[0])
        return out.reshape(size)

    def bernoulli(self, p: float, size=None) -> np.ndarray | bool:
        if size is None:
            return bool(self.uniform() < p)
        return self.uniform(size=size) < p

    def integers(self, low: int, high: int, size=None) -> np.ndarray | int:
        """Integers in [low, high). Uses the top bits modulo the range.

        The modulo bias is < range / 2**64, negligible for the desk-scale
        ranges used here; determinism is what matters.
        """
        span = int(high) - int(low)
        if span <= 0:
            raise ValueError(f"empty integer range [{low}, {high})")
        if size is None:
            return low + self.next_u64() % span
        vals = self.u64_array(int(np.prod(size))) % np.uint64(span)
        return (vals.astype(np.int64) + low).reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) by sorting u64 keys."""
        keys = self.u64_array(n)
        return np.argsort(keys, kind="stable")

    def shuffle(self, items: list) -> list:
        """Return a new shuffled list; the input is left untouched."""
        order = self.permutation(len(items))
        return [items[i] for i in order]
