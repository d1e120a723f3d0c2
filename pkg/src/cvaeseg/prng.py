"""Portable counter-style pseudo-random generator.

Dataset identity and training trajectories must not depend on any standard
library's generator, so every stochastic draw in this package comes from the
splitmix64 sequence below.  The algorithm is fully specified by 64-bit
integer arithmetic and is reproducible across platforms and languages; the
test suite pins known output vectors.

Streams are derived functionally from (seed, *labels) so that a training run
can be resumed mid-way and still consume the exact draws of an unbroken run.
"""

from __future__ import annotations

import math

MASK64 = 0xFFFFFFFFFFFFFFFF

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & MASK64
    return h


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """splitmix64 stream with uniform, integer, and Gaussian draws."""

    def __init__(self, seed: int):
        self._state = seed & MASK64

    @classmethod
    def derive(cls, *parts: int | str) -> "SplitMix64":
        """Build a stream keyed by a path of integers and labels.

        Distinct paths give statistically independent streams; the fold is
        order-sensitive so ("a", 1) and (1, "a") differ.
        """
        acc = 0
        for part in parts:
            v = _fnv1a64(part) if isinstance(part, str) else (part & MASK64)
            acc = _mix((acc + _GOLDEN + v) & MASK64)
        return cls(acc)

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & MASK64
        return _mix(self._state)

    def next_float(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def next_index(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError("n must be positive")
        return int(self.next_float() * n)

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def next_gaussian_pair(self) -> tuple[float, float]:
        """Two independent standard normals via the Marsaglia polar method.

        Avoids sin/cos so the only transcendental involved is log.
        """
        while True:
            u = 2.0 * self.next_float() - 1.0
            v = 2.0 * self.next_float() - 1.0
            r2 = u * u + v * v
            if 0.0 < r2 < 1.0:
                scale = math.sqrt(-2.0 * math.log(r2) / r2)
                return u * scale, v * scale

    def gaussians(self, count: int) -> list[float]:
        out: list[float] = []
        while len(out) < count:
            a, b = self.next_gaussian_pair()
            out.append(a)
            if len(out) < count:
                out.append(b)
        return out

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates using this stream."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_index(i + 1)
            items[i], items[j] = items[j], items[i]
