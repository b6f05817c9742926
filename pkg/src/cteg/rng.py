"""Deterministic random streams.

All sampling in the package goes through RngStream so that runs are exactly
reproducible from a single integer seed.  Raw 64-bit words come from numpy's
PCG64 bit generator (stream fixed by the PCG64 algorithm for a given seed);
uniforms use the standard 53-bit mapping and normals are produced by the
Box-Muller transform on top of those uniforms.  The stream state is fully
described by (seed, position), where position counts raw words consumed, so
a stream can be checkpointed and restored exactly.
"""

import numpy as np
from numpy.random import PCG64

ALGORITHM_ID = "pcg64/boxmuller-v1"

SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(x):
    """One splitmix64 step on a 64-bit value (used for seed/hash derivation)."""
    x = (int(x) + SPLITMIX_GAMMA) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def splitmix64_array(states):
    """Vectorized splitmix64 finalizer over a uint64 numpy array."""
    with np.errstate(over="ignore"):
        x = (states + np.uint64(SPLITMIX_GAMMA))
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


class RngStream:
    """Seeded random stream with exact save/restore via (seed, position)."""

    def __init__(self, seed, _position=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.algorithm = ALGORITHM_ID
        self._bitgen = PCG64(self.seed)
        self.position = 0
        if _position:
            self.advance_to(_position)

    def advance_to(self, position):
        if position < self.position:
            self._bitgen = PCG64(self.seed)
            self.position = 0
        self._bitgen.advance(position - self.position)
        self.position = position

    def raw(self, n):
        """n raw 64-bit words as a uint64 array."""
        self.position += int(n)
        return self._bitgen.random_raw(int(n))

    def uniform(self, shape=()):
        """Uniforms in [0, 1) with 53-bit resolution: (word >> 11) * 2**-53."""
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, shape=()):
        """Standard normals via Box-Muller.

        Consumes raw words in pairs; the spare half of an odd-count request is
        discarded so the state stays a pure function of words consumed.
        """
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        m = (n + 1) // 2
        w = self.raw(2 * m)
        # u1 in (0, 1] so log() is finite; u2 in [0, 1)
        u1 = ((w[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (w[m:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape) if shape else float(z[0])

    def integer(self, k):
        """Uniform integer in [0, k)."""
        if k <= 0:
            raise ValueError("integer() needs k >= 1")
        return min(int(self.uniform() * k), k - 1)

    def permutation(self, n):
        """Fisher-Yates permutation of range(n)."""
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integer(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def choice(self, seq):
        return seq[self.integer(len(seq))]

    def split(self, key):
        """Independent child stream; child seed derived by splitmix64 mixing."""
        child_seed = splitmix64(self.seed ^ splitmix64(key))
        return RngStream(child_seed)

    def state(self):
        return {"seed": self.seed, "position": self.position}

    @classmethod
    def from_state(cls, state):
        return cls(state["seed"], _position=state["position"])
