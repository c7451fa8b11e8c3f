"""Closeness testers with verification queries.

The ℓ2 core draws ``m / lam_hat`` samples from each side and estimates the
relevant self and cross collision counts with ratio coins.  The ℓ1 wrapper
flattens the averaged mixture first; the query-optimal tester learns both
flattened mixtures and reads the relevant fraction of a few buckets.

Testers return a :class:`~testlab.core.Verdict`; declared estimation
failures become ``Verdict.FAIL``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .collisions import CollisionLedger, collision_queries
from .config import TesterConfig
from .core import (
    EstimationFailure,
    GroundTruthProbe,
    Label,
    LogSession,
    LogSet,
    MixtureSpec,
    Pmf,
    SampleSet,
    Session,
    Verdict,
)
from .estimators import CoinSource, additive_budget, estimate_bias_additive
from .flatten import DomainMap, MappedSession, high_sample_flatten_pair, mixture_flatten_pair, unify_map
from .uniformity import _cfg, _draw_count, _guard, _lambda_queries_ceiling, _pairs, _tester_rng, amplify, resolve_lambda

__all__ = [
    "ClosenessStatistic",
    "ReducedSession",
    "bucket_witness_check",
    "clean_statistic",
    "closeness_qopt_query_ceiling",
    "closeness_query_ceiling",
    "closeness_sample_target",
    "learning_error_check",
    "reduce_unequal_mixtures",
    "test_closeness",
    "test_closeness_l2",
    "test_closeness_query_optimal",
]

__test__ = False


# --------------------------------------------------------------------------
# Statistic


@dataclass(frozen=True)
class ClosenessStatistic:
    """Self and cross collision counts of the two sides and the combined statistic."""

    c1: float
    c2: float
    c12: float
    m: int
    Z: float

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("m must be positive")
        if self.Z != self.combine(self.c1, self.c2, self.c12, self.m):
            raise ValueError("Z does not match the collision counts")

    @staticmethod
    def combine(c1: float, c2: float, c12: float, m: int) -> float:
        if m < 1:
            raise ValueError("m must be positive")
        return c1 + c2 - ((m - 1) / m) * c12

    @classmethod
    def from_counts(cls, c1: float, c2: float, c12: float, m: int) -> "ClosenessStatistic":
        c1, c2, c12 = float(c1), float(c2), float(c12)
        return cls(c1, c2, c12, int(m), cls.combine(c1, c2, c12, int(m)))

    def to_dict(self) -> dict:
        return asdict(self)


def clean_statistic(S1: SampleSet, S2: SampleSet, m: Optional[int] = None) -> ClosenessStatistic:
    """Exact statistic of two sample sets, with no verification (clean samples)."""
    m = S1.size if m is None else m
    return ClosenessStatistic.from_counts(S1.collision_count(), S2.collision_count(), S1.cross_count(S2), m)


# --------------------------------------------------------------------------
# ℓ2 core


def closeness_sample_target(b: float, eps: float, lam_hat: float, cfg: TesterConfig) -> int:
    """Per-side relevant sample target ``C sqrt(b/lam)/eps^2 + C' b^2/(eps^4 lam^2)``."""
    return max(
        2,
        math.ceil(cfg.cl_C_m * math.sqrt(b / lam_hat) / eps**2 + cfg.cl_C_b2 * b**2 / (eps**4 * lam_hat**2)),
    )


def _estimate_pair_count(
    S1: SampleSet,
    S2: Optional[SampleSet],
    base: float,
    b: float,
    lam: float,
    target: float,
    cfg: TesterConfig,
    rng: np.random.Generator,
    left: Optional[int],
    trace: Optional[dict],
    key: str,
) -> tuple[float, int]:
    """Estimate relevant collisions within ``S1`` or across ``S1, S2``.

    ``base`` is the number of sample pairs, so ``base * b`` bounds the mean
    collision count.  Returns the estimate and the queries spent.
    """
    led = CollisionLedger(S1, S2)
    c_r = led.pair_count
    c_r_max = cfg.cl_C_markov * base * b
    if trace is not None:
        trace[f"c_r_{key}"] = c_r
    if c_r > c_r_max:
        raise EstimationFailure("collision count exceeds its Markov bound")
    if c_r == 0:
        return 0.0, 0
    c_p_max = cfg.cl_C_markov * base * lam * b
    bound_q = min(0.5, c_p_max / c_r)
    planned = collision_queries(c_r, target, cfg.cl_delta, bound_q, cfg.cl_C_add)
    if planned > _pair_plan_cap(c_p_max, c_r_max, target, cfg):
        raise EstimationFailure("collision verification plan exceeds the query cap")
    t = planned // 2
    if left is not None:
        t = min(t, max(0, left) // 2)
        if t == 0:
            return float(c_r) * lam * lam, 0
    heads = led.coin(rng).flip(t)
    return c_r * heads / t, 2 * t


def _pair_plan_cap(c_p_max: float, c_r_max: float, target: float, cfg: TesterConfig) -> float:
    ln = math.log(1.0 / cfg.cl_delta)
    return 2.0 * cfg.cl_C_add * ln * max(c_p_max * c_r_max / target**2, 2.0) + 2.0


def _l2_once(s1, s2, b, eps, cfg, rng, trace, lam=None) -> Verdict:
    start = s1.queries_used + s2.queries_used
    lam = resolve_lambda(s1, cfg) if lam is None else lam
    m = closeness_sample_target(b, eps, lam, cfg)
    M = _draw_count(m / lam, cfg, rng)
    if M < 2:
        raise EstimationFailure("too few samples drawn")
    S1, S2 = s1.draw(M), s2.draw(M)
    P = _pairs(m)
    target = cfg.cl_c_target * P * eps**2
    if trace is not None:
        trace.update(lam_hat=lam, m=m, M=M, b=b, eps=eps, target=target, S1=S1, S2=S2)

    def left():
        if cfg.query_budget is None:
            return None
        return cfg.query_budget - (s1.queries_used + s2.queries_used - start)

    self_pairs = _pairs(M)
    c1, _ = _estimate_pair_count(S1, None, self_pairs, b, lam, target, cfg, rng, left(), trace, "1")
    c2, _ = _estimate_pair_count(S2, None, self_pairs, b, lam, target, cfg, rng, left(), trace, "2")
    c12, _ = _estimate_pair_count(S1, S2, float(M) * M, b, lam, target, cfg, rng, left(), trace, "12")
    stat = ClosenessStatistic.from_counts(c1, c2, c12, m)
    thr = cfg.cl_accept_factor * P * eps**2
    if trace is not None:
        trace.update(statistic=stat, threshold=thr)
    return Verdict.ACCEPT if stat.Z < thr else Verdict.REJECT


def _check_pair(s1: Session, s2: Session) -> None:
    if s1.n != s2.n:
        raise ValueError("sessions have different domains")
    if s1 is s2:
        raise ValueError("the two sides need separate sessions")


def test_closeness_l2(
    session1: Session,
    session2: Session,
    b: float,
    eps: float,
    *,
    config: Optional[TesterConfig] = None,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[dict] = None,
) -> Verdict:
    """Distinguish ``||p1 - p2||_2 <= eps/4`` from ``||p1 - p2||_2 >= eps``.

    The caller promises ``||r_b||_2^2 <= b`` and ``||p_b||_2^2 <= b / lam``
    on both sides.
    """
    _check_pair(session1, session2)
    if not b > 0:
        raise ValueError("b must be positive")
    cfg = _cfg(config, eps)
    rng = _tester_rng(session1, rng)
    return amplify(lambda: _guard(lambda: _l2_once(session1, session2, b, eps, cfg, rng, trace), trace), cfg.T)


def _l2_ceiling(b: float, eps: float, lam: float, cfg: TesterConfig) -> float:
    """Worst-case collision queries of one ℓ2 run at a given ``lam_hat``."""
    m = closeness_sample_target(b, eps, lam, cfg)
    M = m / lam
    if cfg.poissonized:
        M += 6.0 * math.sqrt(M) + 1.0
    M = math.ceil(M)
    target = cfg.cl_c_target * _pairs(m) * eps**2
    total = 0.0
    for base in (_pairs(M), _pairs(M), float(M) * M):
        c_r_max = cfg.cl_C_markov * base * b
        total += _pair_plan_cap(cfg.cl_C_markov * base * lam * b, c_r_max, target, cfg)
    return total


def closeness_query_ceiling(n: int, m: int, eps: float, lam: float, config: Optional[TesterConfig] = None) -> float:
    """Configured worst-case queries of :func:`test_closeness` per run (both sides).

    The collision plans depend on ``lam_hat`` through ``1/lam_hat^3``; the
    bound is taken at ``lam_hat = lam / 2``.
    """
    cfg = _cfg(config, eps)
    m_flat = max(1, min(m, n))
    b = 4.0 / (cfg.cl_K_flat * m_flat)
    single = _lambda_queries_ceiling(lam, cfg) + _l2_ceiling(b, eps / math.sqrt(n), lam / 2.0, cfg)
    return cfg.T * single


# --------------------------------------------------------------------------
# ℓ1 wrapper


def _closeness_once(s1, s2, n, eps, m, cfg, rng, trace) -> Verdict:
    if n == 1:
        return Verdict.ACCEPT
    lam = resolve_lambda(s1, cfg)
    m_flat = max(1, min(int(m), n))
    F = mixture_flatten_pair(s1, s2, m_flat, rng, cfg.cl_K_flat, cfg.flat_overflow)
    t1, t2 = MappedSession(s1, F, rng), MappedSession(s2, F, rng)
    b = 4.0 / (cfg.cl_K_flat * m_flat)
    if trace is not None:
        trace.update(flat_n=F.target_n, map=F)
    return _l2_once(t1, t2, b, eps / math.sqrt(n), cfg, rng, trace, lam=lam)


def test_closeness(
    session1: Session,
    session2: Session,
    n: int,
    eps: float,
    m: int,
    *,
    config: Optional[TesterConfig] = None,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[dict] = None,
) -> Verdict:
    """Test ``p1 == p2`` against ``||p1 - p2||_1 >= eps`` with sample budget ``m``.

    One flattening map, learned from the averaged mixture, is applied to
    both sides before the ℓ2 core runs at ``eps / sqrt(n)``.
    """
    _check_pair(session1, session2)
    if n != session1.n:
        raise ValueError("n does not match the session domain")
    if m < 1:
        raise ValueError("m must be positive")
    cfg = _cfg(config, eps)
    rng = _tester_rng(session1, rng)
    return amplify(
        lambda: _guard(lambda: _closeness_once(session1, session2, n, eps, m, cfg, rng, trace), trace), cfg.T
    )


# --------------------------------------------------------------------------
# Query-optimal tester


def _qopt_levels(eps: float, lam: float) -> int:
    return max(1, math.ceil(math.log2(8.0 / (eps * lam))))


def _qopt_samples(N: int, eps: float, lam: float, cfg: TesterConfig) -> int:
    L = max(1.0, math.log2(1.0 / (eps * lam)))
    return math.ceil(cfg.clq_C_samples * N * L**2 / (eps**2 * lam))


def _bucket_coin(S: SampleSet, i: int, rng) -> CoinSource:
    return CoinSource(lambda k: S.verify_in_bucket(i, k, rng))


def _qopt_once(s1, s2, n, eps, cfg, rng, trace) -> Verdict:
    lam = resolve_lambda(s1, cfg)
    F = high_sample_flatten_pair(s1, s2, cfg.clq_learn_delta, rng, cfg.clq_C_learn)
    G = unify_map(F.target_n)
    H = F.then(G)
    N = H.target_n
    e = eps / 2.0
    t1, t2 = MappedSession(s1, H, rng), MappedSession(s2, H, rng)
    m = _qopt_samples(N, e, lam, cfg)
    Z1, Z2 = t1.draw(m), t2.draw(m)
    R1, R2 = Z1.counts(), Z2.counts()
    k = _qopt_levels(e, lam)
    gamma = e * lam / 10000.0
    if trace is not None:
        trace.update(lam_hat=lam, map=H, N=N, eps_eff=e, m=m, k=k, Z=(Z1, Z2), tested=[], rejected=None)

    seen: set[int] = set()
    for j in range(1, k + 1):
        X = rng.integers(0, N, size=10 * 2**j)
        tol = lam * e * 2**j / 1000.0
        for i in X.tolist():
            if i in seen:
                continue
            seen.add(i)
            if R1[i] == 0 and R2[i] == 0:
                continue
            w = []
            for Z, R in ((Z1, R1), (Z2, R2)):
                if R[i] == 0:
                    w.append(0.0)
                else:
                    rho = estimate_bias_additive(_bucket_coin(Z, i, rng), 0.5, min(tol, 0.5), gamma, cfg.clq_C_add)
                    w.append(R[i] * rho)
            gap = abs(w[0] - w[1]) / (lam * m)
            if trace is not None:
                trace["tested"].append((j, i))
            if gap > e * 2**j / (8.0 * N):
                if trace is not None:
                    trace["rejected"] = (j, i)
                return Verdict.REJECT
    return Verdict.ACCEPT


def test_closeness_query_optimal(
    session1: Session,
    session2: Session,
    n: int,
    eps: float,
    *,
    config: Optional[TesterConfig] = None,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[dict] = None,
) -> Verdict:
    """Closeness test with ``O~(n/(eps^2 lam))`` samples and ``O~(1/(eps^2 lam))`` queries.

    Both mixtures are flattened by one learned split map followed by a
    unifier, learned from many samples, and compared bucket by bucket on
    random test sets of growing size.
    """
    _check_pair(session1, session2)
    if n != session1.n:
        raise ValueError("n does not match the session domain")
    cfg = _cfg(config, eps)
    rng = _tester_rng(session1, rng)
    return amplify(lambda: _guard(lambda: _qopt_once(session1, session2, n, eps, cfg, rng, trace), trace), cfg.T)


def closeness_qopt_query_ceiling(n: int, eps: float, lam: float, config: Optional[TesterConfig] = None) -> float:
    """Configured worst-case queries of :func:`test_closeness_query_optimal` per run."""
    cfg = _cfg(config, eps)
    lh = lam / 2.0
    e = eps / 2.0
    gamma = e * lh / 10000.0
    total = 0.0
    for j in range(1, _qopt_levels(e, lh) + 1):
        tol = min(lh * e * 2**j / 1000.0, 0.5)
        total += 2 * 10 * 2**j * additive_budget(0.5, tol, gamma, cfg.clq_C_add)
    return cfg.T * (_lambda_queries_ceiling(lam, cfg) + total)


def _mapped_target(spec: MixtureSpec, dmap: DomainMap) -> np.ndarray:
    return dmap.pushforward_mass(spec.target.normalized().mass)


def learning_error_check(trace: dict, spec1: MixtureSpec, spec2: MixtureSpec) -> dict:
    """Hidden-label check of the learned bucket masses on every tested element.

    For each tested ``(j, i)`` and side ``b`` requires
    ``|R_b[i]/m - r_b[i]| <= eps/(200 N)`` and
    ``|P_b[i]/(lam m) - p_b[i]| <= eps 2^j/(200 N)``, with ``P_b`` the
    relevant counts and ``eps, N`` the post-flattening values.
    """
    H, N, e, m = trace["map"], trace["N"], trace["eps_eff"], trace["m"]
    out = {"ok": True, "checked": 0, "worst_r": 0.0, "worst_p": 0.0}
    for Z, spec in zip(trace["Z"], (spec1, spec2)):
        r = H.pushforward_mass(spec.mixture.normalized().mass)
        p = _mapped_target(spec, H)
        R = Z.counts()
        P = GroundTruthProbe.relevant_counts(Z)
        lam = spec.relevant_fraction
        for j, i in trace["tested"]:
            dr = abs(R[i] / m - r[i]) * 200.0 * N / e
            dp = abs(P[i] / (lam * m) - p[i]) * 200.0 * N / (e * 2**j)
            out["worst_r"] = max(out["worst_r"], dr)
            out["worst_p"] = max(out["worst_p"], dp)
            out["checked"] += 1
            if dr > 1.0 or dp > 1.0:
                out["ok"] = False
    return out


def bucket_witness_check(trace: dict, spec1: MixtureSpec, spec2: MixtureSpec) -> Optional[bool]:
    """Whether the rejecting ``(j, i)`` satisfies ``|p1[i] - p2[i]| > eps 2^j/(4N)``.

    Returns ``None`` when the run did not reject.
    """
    if trace.get("rejected") is None:
        return None
    j, i = trace["rejected"]
    H, N, e = trace["map"], trace["N"], trace["eps_eff"]
    gap = abs(_mapped_target(spec1, H)[i] - _mapped_target(spec2, H)[i])
    return bool(gap > e * 2**j / (4.0 * N))


# --------------------------------------------------------------------------
# Unequal mixture parameters


class ReducedSession(Session):
    """One side of :func:`reduce_unequal_mixtures`.

    Draws come from the own session.  A verify query checks the own sample
    and also draws and verifies one fresh sample of the other side; the
    answer is Relevant only if both are.  Counters here record the real
    resources spent on behalf of this side.

    Batches answered from bucket totals thin the own answer by a fresh
    binomial at the other side's relevance rate, which has the law of
    drawing and verifying that many fresh samples there; the other side is
    charged the same samples and queries.
    """

    _aggregate_min = LogSession._aggregate_min

    def __init__(self, own: LogSession, other: LogSession):
        self.inner = own
        self.other = other
        self.n = own.n
        self.seed = own.seed
        self.samples_used = 0
        self.queries_used = 0
        self.spec = _reduced_spec(own.spec, other.spec)
        self._rate = other._frac

    @property
    def _labels(self) -> np.ndarray:
        return self.inner._labels

    @property
    def _order_rng(self):
        return self.inner._order_rng

    def draw(self, k: int) -> LogSet:
        s = self.inner.draw(k)
        self.samples_used += int(k)
        return LogSet(self, s.ids, s.values, self.n)

    def _verify_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        mine = self.inner._verify_ids(ids)
        coin = self.other.draw(ids.size)
        theirs = self.other._verify_ids(coin.ids)
        self.samples_used += int(ids.size)
        self.queries_used += 2 * int(ids.size)
        return mine & theirs

    def verify(self, sample_id: int) -> Label:
        ok = bool(self._verify_ids(np.array([sample_id]))[0])
        return Label.RELEVANT if ok else Label.IRRELEVANT

    def _after_aggregate(self, hits: int, t: int, per_trial: int, rng) -> int:
        k = int(t) * per_trial
        # LogSet already charged this wrapper k queries.
        self.queries_used += k
        self.samples_used += k
        self.inner.queries_used += k
        self.other.queries_used += k
        self.other._phantom += k
        return int(rng.binomial(int(hits), self._rate**per_trial))


def _reduced_spec(a, b) -> Optional[MixtureSpec]:
    if not (isinstance(a, MixtureSpec) and isinstance(b, MixtureSpec)):
        return None
    la, lb = a.relevant_fraction, b.relevant_fraction
    p, q = a.target.normalized(), a.noise.normalized()
    lam = la * lb
    if lam >= 1.0:
        return MixtureSpec(1.0, p, q)
    noise = ((1.0 - la) * q.mass + la * (1.0 - lb) * p.mass) / (1.0 - lam)
    return MixtureSpec(lam, p, Pmf(noise))


def reduce_unequal_mixtures(session1: LogSession, session2: LogSession) -> tuple[ReducedSession, ReducedSession]:
    """Wrap two sessions so that both have relevance parameter ``lam1 * lam2``."""
    for s in (session1, session2):
        if not isinstance(s, LogSession):
            raise TypeError("the reduction needs per-sample log sessions")
    _check_pair(session1, session2)
    return ReducedSession(session1, session2), ReducedSession(session2, session1)


for _f in (test_closeness, test_closeness_l2, test_closeness_query_optimal):
    _f.__test__ = False
del _f
