"""Counter-based random streams.

Every random number is a pure function of ``(seed, path, stream, counters)``,
computed with the splitmix64 finalizer.  Paths can therefore be simulated in
any batch layout or thread order and still see exactly the same numbers.

Key derivation::

    path_key = mix(mix(seed + G) + G * (path + 1))
    slot_key = mix(mix(stream + G) ^ mix(c0 + G) ...)   # folded left to right
    u        = (mix(path_key + slot_key) >> 11 + 0.5) / 2**53
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1

# named sub-streams; kept stable so stored results stay reproducible
BROWNIAN = 1
JUMP_COUNT = 2
JUMP_TIME = 3
JUMP_MARK = 4
JUMP_SIGN = 5
SMALL_JUMP = 6
GENERIC = 7


def _mix(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(v: int) -> int:
    z = v & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _slot_key(stream: int, counters) -> np.ndarray:
    """Fold integer (array) counters into one key; broadcasting applies."""
    key = np.uint64(_mix_int(stream + 0x9E3779B97F4A7C15))
    for c in counters:
        c = np.asarray(c, dtype=np.uint64)
        with np.errstate(over="ignore"):
            key = _mix(key ^ _mix(c + _GOLDEN))
    return key


class StreamFamily:
    """All random streams belonging to one master seed."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK

    def path_keys(self, paths) -> np.ndarray:
        p = np.asarray(paths, dtype=np.uint64)
        base = np.uint64(_mix_int(self.seed + 0x9E3779B97F4A7C15))
        with np.errstate(over="ignore"):
            return _mix(base + _GOLDEN * (p + np.uint64(1)))

    def bits(self, path_keys: np.ndarray, stream: int, *counters) -> np.ndarray:
        slot = _slot_key(stream, counters)
        with np.errstate(over="ignore"):
            return _mix(path_keys + slot)

    def uniform(self, path_keys, stream: int, *counters) -> np.ndarray:
        """Uniforms on the open interval (0, 1)."""
        b = self.bits(path_keys, stream, *counters)
        return ((b >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def normal(self, path_keys, stream: int, *counters) -> np.ndarray:
        return ndtri(self.uniform(path_keys, stream, *counters))

    def path(self, index: int) -> "PathStream":
        return PathStream(self, index)


class PathStream:
    """The random stream of a single path."""

    def __init__(self, family: StreamFamily, index: int):
        self.family = family
        self.index = int(index)
        self.key = family.path_keys(np.array([self.index]))

    @classmethod
    def from_seed(cls, seed: int, index: int = 0) -> "PathStream":
        return cls(StreamFamily(seed), index)

    def uniform(self, stream: int, *counters):
        u = self.family.uniform(self.key, stream, *counters)
        if all(np.ndim(c) == 0 for c in counters):
            return float(u[0])
        return u

    def normal(self, stream: int, *counters):
        return ndtri(self.uniform(stream, *counters))
