"""Self-contained 64-bit linear congruential generator.

State update is ``s <- (A * s + C) mod 2**64`` with Knuth's MMIX constants
``A = 6364136223846793005`` and ``C = 1442695040888963407``. A uniform draw
takes the top 53 bits of the *new* state and scales by ``2**-53``, so
values lie in ``[0, 1)``. Normal draws use the Box-Muller transform on two
consecutive uniforms (the first is mapped to ``(0, 1]``).

Bulk draws are produced with numpy ``uint64`` arithmetic (which wraps
modulo 2**64) using per-block jump-ahead coefficients, and are
bit-identical to repeated single draws.
"""

import numpy as np

MULTIPLIER = 6364136223846793005
INCREMENT = 1442695040888963407
_MASK = (1 << 64) - 1
_BLOCK = 4096


def _jump_tables(n):
    # a_k = A**k, c_k = C * (A**(k-1) + ... + 1), for k = 1..n (mod 2**64)
    a = np.empty(n, dtype=np.uint64)
    c = np.empty(n, dtype=np.uint64)
    ak, ck = 1, 0
    for k in range(n):
        ak = (ak * MULTIPLIER) & _MASK
        ck = (ck * MULTIPLIER + INCREMENT) & _MASK
        a[k] = ak
        c[k] = ck
    return a, c


_TABLES = _jump_tables(_BLOCK)


class Lcg64:
    """Deterministic 64-bit LCG; ``seed`` is reduced modulo 2**64."""

    def __init__(self, seed=0):
        self.state = int(seed) & _MASK

    def next_u64(self):
        self.state = (self.state * MULTIPLIER + INCREMENT) & _MASK
        return self.state

    def _raw(self, n):
        out = np.empty(n, dtype=np.uint64)
        a, c = _TABLES
        pos = 0
        with np.errstate(over="ignore"):
            while pos < n:
                m = min(_BLOCK, n - pos)
                s = np.uint64(self.state)
                out[pos:pos + m] = a[:m] * s + c[:m]
                self.state = int(out[pos + m - 1])
                pos += m
        return out

    def uniform(self, n, low=0.0, high=1.0):
        """``n`` float64 draws from ``[low, high)``."""
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def normal(self, n):
        """``n`` standard normal float64 draws (Box-Muller)."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        u1 = 1.0 - u[:, 0]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n]

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)`` driven by this generator."""
        perm = np.arange(n)
        draws = self.uniform(max(n - 1, 0))
        for i, u in zip(range(n - 1, 0, -1), draws):
            j = int(u * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
