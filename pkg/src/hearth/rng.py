"""Seeded, portable random streams.

The generator is xoshiro256** (Blackman & Vigna), seeded through splitmix64,
implemented directly on 64-bit integer arithmetic so that identical seeds
yield identical sequences on every platform and Python build.  All randomness
in a simulation must come from streams forked off one root seed; nothing may
touch the global `random` module.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class RandomStream:
    """xoshiro256** stream with convenience draws used by the simulation."""

    __slots__ = ("_s",)

    def __init__(self, seed: int):
        seed &= _MASK64
        state = seed
        s = []
        for _ in range(4):
            state, word = _splitmix64(state)
            s.append(word)
        # The all-zero state is degenerate; splitmix64 of any seed avoids it,
        # but guard anyway.
        if not any(s):
            s[0] = 1
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def draw_range(self, lo: int, hi: int) -> int:
        """Uniform integer in the inclusive range [lo, hi]."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        span = hi - lo + 1
        if span == 1:
            return lo
        return lo + self.next_u64() % span

    def chance(self, probability: float) -> bool:
        if probability <= 0.0:
            return False
        if probability >= 1.0:
            return True
        return self.random() < probability

    def choice(self, seq):
        return seq[self.draw_range(0, len(seq) - 1)]

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.draw_range(0, i)
            items[i], items[j] = items[j], items[i]

    def fork(self) -> "RandomStream":
        """Derive an independent child stream (deterministic)."""
        return RandomStream(self.next_u64())
