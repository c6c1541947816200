"""Pinned, splittable random streams.

All randomness in the package goes through :class:`Stream`, a counter-based
SplitMix64 generator. A stream is identified by a tuple of key parts
(``Stream(seed, "init", layer)``); the i-th 64-bit output of a stream is
``mix64(key + (i + 1) * GAMMA)``. Because every output is a pure function of
(key, counter), draws vectorize over numpy ``uint64`` arrays and do not
depend on numpy's own bit generators, whose algorithms may change between
releases.
"""
from __future__ import annotations

import hashlib

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer applied elementwise to a uint64 array."""
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _part_to_int(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK
    if isinstance(part, str):
        return int.from_bytes(hashlib.sha256(part.encode()).digest()[:8], "little")
    raise TypeError(f"unsupported stream key part: {part!r}")


def derive_key(*parts) -> int:
    """Fold key parts into one 64-bit stream key."""
    h = GAMMA
    for p in parts:
        h = _mix_int(h ^ _part_to_int(p))
        h = (h + GAMMA) & _MASK
    return h


class Stream:
    """A sequential view over one counter-based SplitMix64 stream."""

    def __init__(self, *key_parts):
        self.key = derive_key(*key_parts)
        self.counter = 0

    def child(self, *parts) -> "Stream":
        return Stream(self.key, *parts)

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GAMMA)
            return mix64(z)

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller."""
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1], log-safe
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def integers(self, high: int, n: int) -> np.ndarray:
        """Integers in [0, high) (floor of a scaled uniform)."""
        out = np.floor(self.uniform(n) * high).astype(np.int64)
        return np.minimum(out, high - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = list(range(n))
        if n < 2:
            return np.asarray(perm, dtype=np.int64)
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return np.asarray(perm, dtype=np.int64)
