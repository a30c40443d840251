"""Seedable random source.

Raw 64-bit words come from PCG64 (PCG-XSL-RR 128/64, as shipped with numpy).
Uniforms take the top 53 bits of a word and map them into the open interval
(0, 1). Gaussians use Box-Muller on consecutive word pairs ``(u1, u2)``:

    z0 = sqrt(-2 ln u1) * cos(2 pi u2)
    z1 = sqrt(-2 ln u1) * sin(2 pi u2)

emitted in the order z0, z1, z0', z1', ... An odd request consumes a full
pair and drops the last sine value, so the stream position only depends on
the number of values requested.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One SplitMix64 finalisation step; used to derive child seeds."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    s = seed & _MASK64
    for k in keys:
        s = splitmix64(s ^ splitmix64(k & _MASK64))
    return s


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._bits = np.random.PCG64(self.seed)

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n)

    def uniform(self, n: int | None = None):
        k = 1 if n is None else n
        u = ((self.raw(k) >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)
        return float(u[0]) if n is None else u

    def integers(self, high: int, n: int | None = None):
        """Uniform integers in ``[0, high)``."""
        u = self.uniform(1 if n is None else n)
        v = np.minimum((u * high).astype(np.int64), high - 1)
        return int(v[0]) if n is None else v

    def spawn(self, key: int) -> "Rng":
        return Rng(derive_seed(self.seed, key))

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n]


def gaussian(rng: Rng, shape, dtype=np.float32):
    """I.i.d. standard normal tensor; advances ``rng``."""
    from .tensor import Tensor

    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape)) if shape else 1
    return Tensor(rng.normal(n).reshape(shape).astype(dtype))
