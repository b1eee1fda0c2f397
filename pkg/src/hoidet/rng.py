"""Splittable counter-based random number generator.

Every random quantity in the project (parameter init, scene sampling,
batch shuffling) is drawn from an `Rng` stream derived from a single run
seed, so results are byte-reproducible across platforms and library
versions. The generator is the splitmix64 finalizer applied to
``key + i * GOLDEN`` for counter ``i``; child streams are derived by
hashing a tag into a new key, which makes draws independent of the order
in which sibling streams are consumed.
"""

from __future__ import annotations

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _mix64(z: int) -> int:
    z = (z + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z + np.uint64(_GOLDEN)).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class Rng:
    """One deterministic stream of random draws."""

    __slots__ = ("key", "counter")

    def __init__(self, seed: int, _counter: int = 0):
        self.key = _mix64(seed & _MASK)
        self.counter = _counter

    def split(self, tag) -> "Rng":
        """Derive an independent child stream keyed by `tag` (str or int)."""
        if isinstance(tag, str):
            t = _fnv1a(tag.encode("utf-8"))
        else:
            t = _mix64(int(tag) & _MASK)
        child = Rng.__new__(Rng)
        child.key = _mix64(self.key ^ t)
        child.counter = 0
        return child

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        base = np.uint64(self.key) + idx * np.uint64(_GOLDEN)
        return _mix64_array(base)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform float64 draws in [low, high), C-order."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        out = low + u * (high - low)
        return out.reshape(shape) if shape else out[0]

    def integers(self, upper: int, size: int | None = None):
        """Uniform ints in [0, upper). Uses the high-bits product trick."""
        if upper <= 0:
            raise ValueError(f"upper must be positive, got {upper}")
        if size is None:
            return (int(self._raw(1)[0]) * upper) >> 64
        raw = self._raw(size)
        return np.array([(int(r) * upper) >> 64 for r in raw], dtype=np.int64)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, weights: list[float]) -> int:
        """Index drawn proportionally to non-negative weights."""
        total = float(sum(weights))
        u = float(self.uniform()) * total
        acc = 0.0
        for i, w in enumerate(weights):
            acc += w
            if u < acc:
                return i
        return len(weights) - 1
