"""Seeded, portable random streams.

Generator: xorshift64* (Marsaglia shifts 12/25/27, Vigna's multiplier
0x2545F4914F6CDD1D). The 64-bit seed is passed through one splitmix64 step
to form the initial state, so seeds 0, 1, 2... start from well-mixed,
non-zero states.

Derived values, in the order they consume the stream:

* ``uniform``: ``(x >> 11) * 2**-53`` in [0, 1).
* ``normal``: Box-Muller on consecutive uniform pairs ``(u1, u2)``,
  ``r = sqrt(-2 ln(1 - u1))`` and outputs ``r cos(2 pi u2)``, ``r sin(2 pi u2)``;
  an odd request discards the final sine value.
* ``below(n)``: ``(x * n) >> 64`` (multiply-shift, n < 2**32 in practice).

Any implementation following these rules reproduces the same streams.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .linalg import Permutation

MASK64 = (1 << 64) - 1
_MULT = 0x2545F4914F6CDD1D
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class Rng:
    """xorshift64* stream. Not thread-safe; use one instance per thread."""

    def __init__(self, seed: int):
        if not isinstance(seed, (int, np.integer)):
            raise ParameterError(f"seed must be an integer, got {type(seed).__name__}")
        state = splitmix64(int(seed) & MASK64)
        self._state = state or _GOLDEN

    def next_u64(self) -> int:
        x = self._state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self._state = x
        return (x * _MULT) & MASK64

    def u64(self, n: int) -> list[int]:
        x = self._state
        out = [0] * n
        for i in range(n):
            x ^= x >> 12
            x ^= (x << 25) & MASK64
            x ^= x >> 27
            out[i] = (x * _MULT) & MASK64
        self._state = x
        return out

    def uniform(self, n: int) -> np.ndarray:
        bits = np.array(self.u64(n), dtype=np.uint64) >> np.uint64(11)
        return bits.astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n]

    def below(self, n: int) -> int:
        return (self.next_u64() * n) >> 64

    def spawn(self) -> "Rng":
        """Child stream seeded from the next output of this one."""
        return Rng(self.next_u64())


def sample_gaussian(rows: int, cols: int, std: float, rng: Rng) -> np.ndarray:
    if not std > 0:
        raise ParameterError(f"std must be positive, got {std}")
    return (std * rng.normal(rows * cols)).reshape(rows, cols)


def sample_permutation(n: int, rng: Rng) -> Permutation:
    """Uniform permutation via Fisher-Yates (i from n-1 down to 1)."""
    if n < 1:
        raise ParameterError(f"permutation size must be >= 1, got {n}")
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        order[i], order[j] = order[j], order[i]
    return Permutation(order)


def sample_diagonal(n: int, lo: float, hi: float, rng: Rng) -> np.ndarray:
    """Diagonal matrix with entries uniform in [lo, hi]."""
    if not 0 < lo <= hi:
        raise ParameterError(f"need 0 < lo <= hi, got lo={lo}, hi={hi}")
    return np.diag(lo + (hi - lo) * rng.uniform(n))
