"""Portable seeded randomness.

Everything random in the package draws from a PCG64 bit generator fed through
the helpers below, so a seed reproduces the same values on every platform.
Only the raw 64-bit output of PCG64 is used; uniform doubles, bounded
integers and normal variates are derived here rather than through numpy's
``Generator`` methods, whose algorithms may change between releases.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * math.pi


def derive_seed(master: int, *keys: int) -> int:
    """Mix ``master`` with integer ``keys`` into a new 64-bit seed."""
    words = [int(master) & _MASK64] + [int(k) & _MASK64 for k in keys]
    state = np.random.SeedSequence(words).generate_state(1, np.uint64)
    return int(state[0])


class Stream:
    """A reproducible random stream over PCG64 raw output."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._bits = np.random.PCG64(np.random.SeedSequence([self.seed]))

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64)

    def uniform(self, n: int | None = None) -> np.ndarray | float:
        """Doubles in [0, 1) from the top 53 bits of each draw."""
        k = 1 if n is None else n
        u = (self.raw(k) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(u[0]) if n is None else u

    def uniform_range(self, lo: float, hi: float) -> float:
        """Closed-interval draw: lo + u*(hi-lo) with u in [0, 1]."""
        u = int(self.raw(1)[0] >> np.uint64(11)) / float((1 << 53) - 1)
        return lo + u * (hi - lo)

    def integer(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = int(self.raw(1)[0])
            if r < limit:
                return r % n

    def choice(self, items):
        return items[self.integer(len(items))]

    def normal(self, n: int) -> np.ndarray:
        """Standard normal variates by Box-Muller.

        Pairs are drawn as (u1, u2) consecutively; u1 is mapped to (0, 1] and
        the pair yields (r cos t, r sin t), emitted in that order.
        """
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        u1 = 1.0 - u[:, 0]
        r = np.sqrt(-2.0 * np.log(u1))
        t = _TWO_PI * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(t)
        z[:, 1] = r * np.sin(t)
        return z.reshape(-1)[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        out = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            out[i], out[j] = out[j], out[i]
        return out
