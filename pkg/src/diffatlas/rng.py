"""Deterministic random numbers: xoshiro256++ with Box-Muller Gaussians.

Every stochastic piece of the lab (data synthesis, weight init, training
noise, sampling chains) draws from this generator so that runs are bitwise
reproducible from a single u64 seed, independent of numpy's global state.
"""

import numpy as np

from . import backend

_MASK = 0xFFFFFFFFFFFFFFFF
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _splitmix64(z):
    """Advance a splitmix64 state, returning (new_state, output)."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    x = z
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return z, x ^ (x >> 31)


def _fnv1a(label: str) -> int:
    h = _FNV_OFFSET
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


class Rng:
    """xoshiro256++ stream seeded via splitmix64.

    Identical seeds give identical streams; `split(label)` derives an
    independent deterministic substream keyed by the label string.
    """

    __slots__ = ("seed", "_state")

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        z = self.seed
        words = []
        for _ in range(4):
            z, out = _splitmix64(z)
            words.append(out)
        if not any(words):
            words[0] = 1
        self._state = np.array(words, dtype=np.uint64)

    def split(self, label: str) -> "Rng":
        return Rng(self.seed ^ _fnv1a(label))

    def next_u64(self) -> int:
        s = [int(v) for v in self._state]
        out = backend._xoshiro_next(s)
        self._state[:] = s
        return out

    def uniform(self) -> float:
        """One double in [0, 1)."""
        return (self.next_u64() >> 11) * backend._SCALE

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive, by modulo reduction."""
        span = hi - lo + 1
        return lo + self.next_u64() % span

    def gaussian(self, shape) -> np.ndarray:
        """float32 array of standard normals (Box-Muller pairs)."""
        if np.isscalar(shape):
            shape = (shape,)
        out = np.empty(int(np.prod(shape)), dtype=np.float32)
        backend.fill_gaussian(self._state, out)
        return out.reshape(shape)


def mix_seeds(a: int, b: int) -> int:
    """Deterministic u64 hash of a seed pair (run seed, sample seed)."""
    _, x = _splitmix64((a & _MASK) ^ 0x9E3779B97F4A7C15)
    _, y = _splitmix64(x ^ (b & _MASK))
    return y
