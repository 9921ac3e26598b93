"""Seedable, splittable pseudo-random generator used everywhere randomness is needed.

The generator is xoshiro256** (Blackman & Vigna), seeded through SplitMix64,
so every stream is reproducible from a 64-bit seed independently of the host
platform or any library RNG. Streams are split by hashing the parent seed
together with string/int tokens (`derive_seed`), which is how per-image and
per-epoch sampling stay order-independent under parallel workers.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (next_state, output)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _scramble(x: int) -> int:
    """SplitMix64 output function on its own, used as a 64-bit mixer."""
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & _MASK64
    return h


def derive_seed(seed: int, *tokens: int | str) -> int:
    """Fold tokens into `seed`, producing an independent child seed.

    Strings hash their UTF-8 bytes; ints fold directly. Token kinds are
    domain-separated so derive_seed(s, 1) != derive_seed(s, "1").
    """
    h = seed & _MASK64
    for tok in tokens:
        if isinstance(tok, str):
            h = _scramble(h ^ fnv1a64(tok.encode("utf-8")) ^ 0xA5)
        else:
            h = _scramble(h ^ (tok & _MASK64) ^ 0x5A)
    return h


class Xoshiro256StarStar:
    """xoshiro256** with SplitMix64 state expansion from a 64-bit seed."""

    __slots__ = ("_s0", "_s1", "_s2", "_s3", "_gauss_spare")

    def __init__(self, seed: int):
        sm = seed & _MASK64
        sm, self._s0 = splitmix64(sm)
        sm, self._s1 = splitmix64(sm)
        sm, self._s2 = splitmix64(sm)
        sm, self._s3 = splitmix64(sm)
        self._gauss_spare: float | None = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return result

    def next_double(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (2.0**-53)

    def next_below(self, bound: int) -> int:
        """Unbiased uniform integer in [0, bound)."""
        if bound <= 0:
            raise ValueError(f"bound must be positive, got {bound}")
        # Classic modulo rejection: discard the final partial block.
        limit = ((1 << 64) // bound) * bound
        while True:
            x = self.next_u64()
            if x < limit:
                return x % bound

    def next_int(self, lo: int, hi: int) -> int:
        """Uniform integer in the inclusive range [lo, hi]."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.next_below(hi - lo + 1)

    def next_gaussian(self) -> float:
        """Standard normal via Box-Muller; deterministic per stream."""
        if self._gauss_spare is not None:
            z = self._gauss_spare
            self._gauss_spare = None
            return z
        # u1 in (0, 1] so log() is finite.
        u1 = ((self.next_u64() >> 11) + 1) * (2.0**-53)
        u2 = self.next_double()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._gauss_spare = r * math.sin(theta)
        return r * math.cos(theta)

    def gaussians(self, n: int) -> list[float]:
        return [self.next_gaussian() for _ in range(n)]
