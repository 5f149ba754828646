"""Portable seeded random numbers.

Synthetic scenes and parameter initialisation must be reproducible by other
implementations, so this module pins the algorithm rather than relying on
numpy's generator internals:

* state seeding: splitmix64 expands a 64-bit seed into four state words;
* generator: xoshiro256** (Blackman & Vigna, 2018);
* doubles: ``(x >> 11) * 2**-53``, uniform on [0, 1);
* normals: Box-Muller, ``u1 = 1 - next_double()``, ``u2 = next_double()``,
  emitting ``r*cos(2*pi*u2)`` first and ``r*sin(2*pi*u2)`` second.
"""

import math

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(state):
    """Return ``(next_state, output)`` for one splitmix64 step."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


class Xoshiro256:
    """xoshiro256** generator seeded through splitmix64."""

    def __init__(self, seed):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        sm = seed & _MASK
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    def next_u64(self):
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def next_double(self):
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def uniform(self, n, low=0.0, high=1.0):
        """``n`` doubles on [low, high) as a float64 array."""
        nd = self.next_double
        out = np.fromiter((nd() for _ in range(n)), dtype=np.float64, count=n)
        return low + (high - low) * out

    def normal(self, n):
        """``n`` standard normals via Box-Muller; odd ``n`` drops the last sine."""
        out = np.empty(n, dtype=np.float64)
        nd = self.next_double
        two_pi = 2.0 * math.pi
        for k in range(0, n, 2):
            u1 = 1.0 - nd()
            u2 = nd()
            r = math.sqrt(-2.0 * math.log(u1))
            out[k] = r * math.cos(two_pi * u2)
            if k + 1 < n:
                out[k + 1] = r * math.sin(two_pi * u2)
        return out

    def integers(self, n, high):
        """``n`` integers on [0, high) by multiply-shift (bias < 2**-32 for small ``high``)."""
        return np.array(
            [((self.next_u64() >> 32) * high) >> 32 for _ in range(n)], dtype=np.int64
        )
