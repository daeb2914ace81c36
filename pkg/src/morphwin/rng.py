"""Deterministic, platform-independent pseudo-random source.

The generator is splitmix64 evaluated in counter mode: output i is the
standard splitmix64 mix function applied to ``seed + (i+1)*GOLDEN``, which
reproduces the sequential splitmix64 stream exactly while vectorizing over
numpy uint64 arrays. All derived samples (uniforms, normals, truncated
normals) are pure functions of the seed and draw order, so volumes and
parameter initializations are bit-reproducible across platforms.
"""

from __future__ import annotations

import math

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-mode splitmix64 stream with convenience samplers."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._pos = 0

    def child(self, tag: int) -> "Rng":
        """Independent stream derived from this seed and an integer tag."""
        tagged = self._seed ^ _mix(np.uint64(tag & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
        return Rng(int(_mix(tagged)))

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._pos + 1, self._pos + n + 1, dtype=np.uint64)
        self._pos += n
        return _mix(self._seed + idx * _GOLDEN)

    def uniforms(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """n float64 samples in [lo, hi) with 53-bit resolution."""
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return lo + u * (hi - lo)

    def integers(self, n: int, lo: int, hi: int) -> np.ndarray:
        """n integers in [lo, hi); modulo reduction (bias negligible here)."""
        if hi <= lo:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        return (self.raw(n) % np.uint64(hi - lo)).astype(np.int64) + lo

    def normals(self, n: int, std: float = 1.0) -> np.ndarray:
        """n standard-normal samples via Box-Muller."""
        pairs = (n + 1) // 2
        u1 = 1.0 - self.uniforms(pairs)  # (0, 1], keeps log finite
        u2 = self.uniforms(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return out * std

    def truncated_normals(self, n: int, std: float = 1.0, bound: float = 2.0) -> np.ndarray:
        """Normals with |z| <= bound (in units of std), by rejection."""
        out = np.empty(0)
        while out.size < n:
            cand = self.normals(max(n - out.size, 16) * 2)
            out = np.concatenate([out, cand[np.abs(cand) <= bound]])
        return out[:n] * std
