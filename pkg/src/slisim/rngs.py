"""Reproducible random-stream layout for all simulators.

Every stream is a numpy ``Generator`` over ``PCG64`` seeded by a
``SeedSequence`` whose entropy is the tuple

    (*master_seed, role, index)

where ``master_seed`` is the user seed (an int, or a tuple when a caller has
already namespaced replications) and ``role`` is one of the constants below.
This is a splittable, collision-resistant scheme: distinct (role, index)
pairs give independent streams, replications get disjoint master tuples, and
no stream's consumption pattern can perturb another's.

The particle engine draws from three kinds of streams:

- one *system* stream producing (exponential, index) proposal pairs, realised
  as uniform pairs u1, u2 -> (-ln(u1)/rate, floor(u2 * n)); block-buffering
  is bitwise identical to scalar draws because ``Generator.random`` consumes
  the underlying bit stream value by value;
- one *Brownian* stream per particle, consumed one standard normal per factor
  step and block-buffered the same way;
- one *decision* stream per particle, consumed one uniform per thinning
  proposal addressed to that particle.

Keeping Brownian and decision draws per particle makes the naive/improved
strategy equivalence exact: acceptance decisions only depend on each
particle's own consumption sequence, never on global draw interleaving.
"""
from __future__ import annotations

import numpy as np
from numpy.random import Generator, PCG64, SeedSequence

__all__ = [
    "ROLE_SYSTEM",
    "ROLE_BROWNIAN",
    "ROLE_DECISION",
    "ROLE_LI_PATH",
    "ROLE_CTMC_PATH",
    "ROLE_INIT",
    "ROLE_CTMC_BATCH",
    "ROLE_STUDY",
    "ROLE_REFERENCE",
    "ROLE_CLT",
    "seed_tuple",
    "make_generator",
    "SystemStreams",
]

ROLE_SYSTEM = 0
ROLE_BROWNIAN = 1
ROLE_DECISION = 2
ROLE_LI_PATH = 3
ROLE_CTMC_PATH = 4
ROLE_INIT = 5
ROLE_CTMC_BATCH = 6
ROLE_STUDY = 7
ROLE_REFERENCE = 8
ROLE_CLT = 9

_INF = float("inf")


def seed_tuple(seed) -> tuple[int, ...]:
    """Normalize a user seed (int or tuple of ints) to an entropy tuple."""
    if isinstance(seed, tuple):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def make_generator(seed, role: int, index: int = 0) -> Generator:
    """One independent stream for (seed, role, index)."""
    return Generator(PCG64(SeedSequence(seed_tuple(seed) + (role, index))))


class SystemStreams:
    """All streams one particle system consumes, with block buffers.

    Args:
        seed: Master seed (int or tuple).
        n: Particle count.
        rate: System proposal rate n * lambda_bar * f_high / f_low.
        brownian_block: Normals buffered per particle. Sized so a typical run
            never refills; refills are handled transparently either way.
        proposal_block: (exponential, index) pairs buffered per refill.
    """

    def __init__(self, seed, n: int, rate: float, *,
                 brownian_block: int = 128, proposal_block: int = 4096):
        base = seed_tuple(seed)
        self.n = n
        self.rate = float(rate)
        self._pb = int(proposal_block)
        self._bb = int(brownian_block)
        self.system_gen = Generator(PCG64(SeedSequence(base + (ROLE_SYSTEM, 0))))
        self.brownian_gens = [
            Generator(PCG64(SeedSequence(base + (ROLE_BROWNIAN, i)))) for i in range(n)
        ]
        self.decision_gens = [
            Generator(PCG64(SeedSequence(base + (ROLE_DECISION, i)))) for i in range(n)
        ]
        # Bound-method table: the hot loop calls decision_rand[i]() directly.
        self.decision_rand = [g.random for g in self.decision_gens]
        self._zbuf = np.empty((n, self._bb))
        for i in range(n):
            self._zbuf[i] = self.brownian_gens[i].standard_normal(self._bb)
        self._zcur = np.zeros(n, dtype=np.int64)
        self._rows = np.arange(n)

    # -- proposal stream ----------------------------------------------------

    def refill_proposals(self) -> tuple[list[float], list[int]]:
        """Next block of proposal pairs, as plain lists for the hot loop.

        Pair k is (u1, u2) consumed in that order from the system stream;
        the exponential uses the inverse CDF -ln(u1)/rate and the particle
        index is floor(u2 * n). u1 = 0.0 (probability 2^-53 per draw) maps to
        +inf, which simply ends the run at the horizon.
        """
        u = self.system_gen.random((self._pb, 2))
        with np.errstate(divide="ignore"):
            es = -np.log(u[:, 0])
        if self.rate > 0.0:
            es /= self.rate
        else:  # rate 0: no proposals ever arrive
            es.fill(_INF)
        idx = (u[:, 1] * self.n).astype(np.int64)
        return es.tolist(), idx.tolist()

    def next_proposal(self) -> tuple[float, int]:
        """Scalar (waiting time, particle index) pair; op-level convenience."""
        es, ids = getattr(self, "_pending", (None, None))
        cur = getattr(self, "_pending_cur", 0)
        if es is None or cur >= len(es):
            es, ids = self.refill_proposals()
            self._pending = (es, ids)
            cur = 0
        self._pending_cur = cur + 1
        return es[cur], ids[cur]

    # -- per-particle Brownian buffers ---------------------------------------

    def _refill_row(self, i: int) -> None:
        self._zbuf[i] = self.brownian_gens[i].standard_normal(self._bb)
        self._zcur[i] = 0

    def normals_all(self) -> np.ndarray:
        """One standard normal for every particle (vectorized gather)."""
        cur = self._zcur
        if cur.max() >= self._bb:
            for i in np.nonzero(cur >= self._bb)[0]:
                self._refill_row(int(i))
        z = self._zbuf[self._rows, cur]
        cur += 1
        return z

    def normals_for(self, idx: np.ndarray) -> np.ndarray:
        """One standard normal for each particle in ``idx`` (sorted or not)."""
        cur = self._zcur
        sub = cur[idx]
        if sub.max(initial=-1) >= self._bb:
            for i in idx[sub >= self._bb]:
                self._refill_row(int(i))
            sub = cur[idx]
        z = self._zbuf[idx, sub]
        cur[idx] = sub + 1
        return z

    def normal_one(self, i: int) -> float:
        """Next standard normal of particle ``i``'s Brownian stream."""
        c = self._zcur[i]
        if c >= self._bb:
            self._refill_row(i)
            c = 0
        self._zcur[i] = c + 1
        return float(self._zbuf[i, c])

    def decision_one(self, i: int) -> float:
        """Next jump-decision uniform of particle ``i``."""
        return self.decision_rand[i]()
