"""Collision counting and query-driven collision estimation.

A collision is an unordered pair of samples with equal values; a bucket of
frequency ``f`` contributes ``C(f, 2)`` of them.  Cross collisions between
two sample sets are ordered pairs ``(x, y)`` in ``S1 x S2`` with ``x == y``.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Union

import numpy as np

from .core import LogSet, SampleSet, _Sampler, exact_choose, exact_cross, exact_pairs, pairs
from .estimators import C_ADD, CoinSource, additive_budget, estimate_bias_additive

__all__ = [
    "CollisionLedger",
    "count_c_collisions",
    "count_collisions",
    "count_cross",
    "estimate_p_collision_count",
    "estimate_p_sample_count",
    "p_sample_queries",
]

C_MP = 400.0

ValuesLike = Union[SampleSet, Sequence[int], np.ndarray]


def _counts(log: ValuesLike, n: Optional[int] = None) -> np.ndarray:
    if isinstance(log, SampleSet):
        return log.counts()
    v = np.asarray(log, dtype=np.int64)
    if v.size == 0:
        return np.zeros(n or 0, dtype=np.int64)
    return np.bincount(v, minlength=n or 0)


def count_collisions(log: ValuesLike) -> int:
    """Exact number of colliding unordered pairs."""
    return exact_pairs(_counts(log))


def count_c_collisions(log: ValuesLike, c: int) -> int:
    """Number of unordered ``c``-tuples with equal values, ``sum_v C(f_v, c)``."""
    if c < 2:
        raise ValueError("c must be at least 2")
    return exact_choose(_counts(log), c)


def count_cross(log1: ValuesLike, log2: ValuesLike) -> int:
    a, b = _counts(log1), _counts(log2)
    n = max(a.size, b.size)
    a = np.pad(a, (0, n - a.size))
    b = np.pad(b, (0, n - b.size))
    return exact_cross(a, b)


class CollisionLedger:
    """Collisions of one sample set, or cross collisions of two.

    ``coin(rng)`` returns a :class:`CoinSource` whose trial picks a uniformly
    random collision (with replacement) and verifies both endpoints; it
    lands heads exactly when both samples are relevant.
    """

    def __init__(self, first: SampleSet, second: Optional[SampleSet] = None, subset=None):
        if second is not None and second.n != first.n:
            raise ValueError("cross ledger needs a common domain")
        self.first = first
        self.second = second
        self.subset = subset
        if second is None:
            self.pair_count = first.collision_count(subset)
        else:
            self.pair_count = first.cross_count(second, subset)

    @property
    def is_cross(self) -> bool:
        return self.second is not None

    def value_to_ids(self) -> dict[int, np.ndarray]:
        if not isinstance(self.first, LogSet):
            raise TypeError("sample ids are only available for logged sessions")
        out = {}
        for v in np.flatnonzero(self.first.counts()):
            out[int(v)] = self.first.members(int(v))
        return out

    def uniform_collision(self, rng: np.random.Generator) -> tuple[int, int]:
        """One uniformly random colliding pair of sample ids (self ledger, logged sets)."""
        if self.is_cross or not isinstance(self.first, LogSet):
            raise TypeError("uniform_collision needs a self ledger over a logged set")
        c = self.first.counts()
        if self.subset is not None:
            from .core import _mask

            c = c * _mask(self.subset, self.first.n)
        w = pairs(c)
        if w.sum() == 0:
            raise ValueError("no collisions")
        b = int(_Sampler(w).sample(1, rng)[0])
        mem = self.first.members(b)
        i, j = rng.choice(mem.size, size=2, replace=False)
        return int(mem[i]), int(mem[j])

    def coin(self, rng: np.random.Generator) -> CoinSource:
        if self.second is None:
            return CoinSource(lambda k: self.first.verify_collisions(k, rng, self.subset))
        return CoinSource(lambda k: self.first.verify_cross(self.second, k, rng, self.subset))


def p_sample_queries(eps: float, lam_hat: float, C: float = C_MP) -> int:
    return math.ceil(C / (eps**4 * lam_hat**2))


def estimate_p_sample_count(
    log: SampleSet, eps: float, lam_hat: float, rng: np.random.Generator, C: float = C_MP
) -> float:
    """Estimate the number of relevant samples in ``log``.

    Verifies ``ceil(C / (eps^4 lam_hat^2))`` uniformly random members and
    scales the relevant fraction by ``|log|``.
    """
    size = log.size
    if size == 0:
        return 0.0
    q = p_sample_queries(eps, lam_hat, C)
    return log.verify_uniform(q, rng) * size / q


def estimate_p_collision_count(
    ledger: CollisionLedger,
    target_error: float,
    delta: float,
    rng: np.random.Generator,
    bound_q: float = 0.5,
    C_add: float = C_ADD,
) -> float:
    """Estimate the number of collisions with both endpoints relevant.

    The relevant fraction of collisions is a Bernoulli coin; it is estimated
    to additive accuracy ``target_error / c(S_r)`` and scaled back.  An empty
    ledger gives 0 without any query.
    """
    c_r = ledger.pair_count
    if c_r == 0:
        return 0.0
    bound_q = min(0.5, bound_q)
    eps = min(target_error / c_r, 0.5)
    rho = estimate_bias_additive(ledger.coin(rng), bound_q, eps, delta, C_add)
    return c_r * rho


def collision_queries(c_r: int, target_error: float, delta: float, bound_q: float = 0.5, C_add: float = C_ADD) -> int:
    """Queries charged by :func:`estimate_p_collision_count` (two per trial)."""
    if c_r == 0:
        return 0
    bound_q = min(0.5, bound_q)
    eps = min(target_error / c_r, 0.5)
    return 2 * additive_budget(bound_q, eps, delta, C_add)
