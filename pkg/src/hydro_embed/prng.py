"""Deterministic random number generation.

All stochastic choices in the toolkit (weight init, shuffling, dropout
masks, synthetic weather) flow through one fixed generator so that runs
are bit-reproducible from a single integer seed, independent of Python or
numpy RNG internals. The construction is normative:

* stream seeding: splitmix64 initialized with the user seed; its first
  four outputs become the xoshiro256** state,
* draws: xoshiro256** (Blackman & Vigna), 64-bit outputs,
* floats: ``(u64 >> 11) * 2**-53`` giving a double in [0, 1),
* bounded ints: ``u64 % n`` (the modulo bias is irrelevant here and the
  rule is trivially portable),
* shuffling: modern Fisher-Yates, descending index, ``j = below(i + 1)``.

Derived streams (per-epoch shuffle/dropout seeds, per-basin weather
seeds) come from :func:`derive_seed`, a pure function of (seed, index).
"""

MASK64 = 0xFFFFFFFFFFFFFFFF

_SM_GAMMA = 0x9E3779B97F4A7C15
_SM_MUL1 = 0xBF58476D1CE4E5B9
_SM_MUL2 = 0x94D049BB133111EB


def _splitmix64_mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _SM_MUL1) & MASK64
    z = ((z ^ (z >> 27)) * _SM_MUL2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """The splitmix64 generator; used only to seed xoshiro and derive sub-seeds."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _SM_GAMMA) & MASK64
        return _splitmix64_mix(self.state)


def derive_seed(seed: int, index: int) -> int:
    """Sub-seed ``index`` of the splitmix64 stream rooted at ``seed``.

    Equals the (index+1)-th splitmix64 output, computed in O(1) because the
    splitmix state advances by a fixed constant per draw.
    """
    if index < 0:
        raise ValueError("index must be >= 0")
    state = (seed + (index + 1) * _SM_GAMMA) & MASK64
    return _splitmix64_mix(state)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256StarStar:
    """xoshiro256** seeded via splitmix64, per the module contract."""

    def __init__(self, seed: int):
        sm = SplitMix64(seed)
        self.s = [sm.next_u64() for _ in range(4)]

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def next_float(self) -> float:
        # 53 explicit mantissa bits -> uniform double in [0, 1)
        return (self.next_u64() >> 11) * 1.1102230246251565e-16  # 2**-53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates permutation as fixed by the module contract."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
