"""Instance generators: standard test distributions and the hard families.

Every generator attaches ground truth computed from the pmfs it emits (not
from the parameters it was asked for).  The two hard families are built as
non-negative measures first; :class:`HardInstance` keeps the raw measures
(useful for Poissonized experiments) next to the normalized mixture specs
that sessions consume.

Bucket types of the hard families come from a stream that does not depend
on ``X``, so the same seed gives the same type vector in both branches and
the emitted mixtures agree up to normalization.
"""

from __future__ import annotations

import warnings
import weakref
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .core import (
    AdversarialSpec,
    GroundTruth,
    MixtureSpec,
    Pmf,
    SampleSet,
    Session,
    l1_distance,
    make_rng,
    tvd,
)

__all__ = [
    "FAMILIES",
    "HardInstance",
    "InstanceSpec",
    "RetryLimitExceeded",
    "build_instance",
    "closeness_collision_table",
    "gen_closeness_hard",
    "gen_masked_far",
    "gen_paninski",
    "gen_uniformity_hard",
    "poissonize",
    "table1_formulas",
]

FAMILIES = ("Uniform", "Paninski", "MaskedFar", "UniformityHard", "ClosenessHard")
NORM_RANGE = (0.9, 1.1)
_DIST_NAMES = ("p1", "q1", "p2", "q2")


class RetryLimitExceeded(RuntimeError):
    """A hard-instance generator kept hitting the normalization-failure event."""


@dataclass
class InstanceSpec:
    """Description and ground truth of one emitted instance.

    ``distance`` is ``tvd(p, U_n)`` for uniformity families and
    ``||p1 - p2||_1`` for closeness families.  ``norms`` holds the l1 masses
    of the raw measures before normalization and ``lam_effective`` the
    relevance parameter(s) after it.
    """

    family: str
    n: int
    params: dict
    ground_truth: GroundTruth
    distance: float
    norms: dict = field(default_factory=dict)
    lam_effective: Union[float, tuple, None] = None
    attempts: int = 1
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        lam = self.lam_effective
        return {
            "family": self.family,
            "n": self.n,
            "params": dict(self.params),
            "ground_truth": self.ground_truth.value,
            "distance": self.distance,
            "norms": dict(self.norms),
            "lam_effective": list(lam) if isinstance(lam, tuple) else lam,
            "attempts": self.attempts,
            "metadata": self.metadata,
        }


@dataclass
class HardInstance:
    """Emitted instance: one spec (uniformity) or two (closeness)."""

    specs: tuple
    info: InstanceSpec
    measures: dict = field(default_factory=dict)

    @property
    def spec(self) -> MixtureSpec:
        return self.specs[0]

    @property
    def ground_truth(self) -> GroundTruth:
        return self.info.ground_truth

    def to_dict(self) -> dict:
        if len(self.specs) == 1:
            body = self.specs[0].to_dict()
        else:
            body = {"sides": [s.to_dict() for s in self.specs]}
        body["metadata"] = self.info.to_dict()
        return body


# --------------------------------------------------------------------------
# Standard families


def gen_paninski(n: int, eps: float) -> Pmf:
    """Alternating masses ``(1 + 2 eps)/n, (1 - 2 eps)/n``; tvd to uniform is ``eps``."""
    if n < 2 or n % 2:
        raise ValueError("the Paninski family needs an even n")
    if not 0.0 <= eps < 0.5:
        raise ValueError("eps must lie in [0, 1/2)")
    mass = np.empty(n)
    mass[0::2] = (1.0 + 2.0 * eps) / n
    mass[1::2] = (1.0 - 2.0 * eps) / n
    return Pmf(mass)


def gen_masked_far(n: int, eps: float, lam: float, target: Optional[Pmf] = None) -> MixtureSpec:
    """Contaminated source whose mixture is exactly uniform.

    ``target`` defaults to the Paninski pmf at ``eps``; the noise is
    ``q = (U_n - lam p) / (1 - lam)``.
    """
    p = gen_paninski(n, eps) if target is None else target
    if p.n != n:
        raise ValueError("target has the wrong domain size")
    if not 0.0 < lam <= 1.0:
        raise ValueError("lambda must lie in (0, 1]")
    u = np.full(n, 1.0 / n)
    if lam == 1.0:
        if np.max(np.abs(p.mass - u)) > 1e-15:
            raise ValueError("lambda = 1 leaves no room to mask a non-uniform target")
        return MixtureSpec(1.0, p, Pmf(u))
    raw = (u - lam * p.mass) / (1.0 - lam)
    if raw.min() < -1e-12:
        raise ValueError(
            f"lambda={lam} is too large: the masking noise would be negative (need lambda <= 1/(1+2 eps))"
        )
    q = np.clip(raw, 0.0, None)
    return MixtureSpec(lam, p, Pmf(q / q.sum()))


# --------------------------------------------------------------------------
# Hard families


def _regime(ok: bool, msg: str, strict: bool) -> None:
    if ok:
        return
    if strict:
        raise ValueError(msg)
    warnings.warn(msg, stacklevel=3)


def _normalize(lam: float, p: np.ndarray, q: np.ndarray) -> tuple[MixtureSpec, float, float]:
    """Normalize both measures; the returned spec's mixture is ``r / ||r||_1``."""
    sp, sq = float(p.sum()), float(q.sum())
    wp, wq = lam * sp, (1.0 - lam) * sq
    lam_eff = wp / (wp + wq)
    return MixtureSpec(lam_eff, Pmf(p / sp), Pmf(q / sq)), sp, sq


def gen_uniformity_hard(
    n: int,
    m: int,
    eps: float,
    lam: float,
    X: int,
    seed: int = 0,
    *,
    strict: bool = False,
    max_attempts: int = 50,
    far_ratio: float = 0.9,
) -> HardInstance:
    """Three-type hard instance for contaminated uniformity testing.

    Each bucket is heavy with probability ``m/n`` and otherwise one of two
    light types.  With ``alpha = lam / (1 - lam)``: heavy buckets carry
    ``(1/n, 4 eps alpha/n + (1 - 4 eps alpha)/m)``; for ``X = 0`` both light
    types carry ``(1/n, 4 eps alpha/n)``, and for ``X = 1`` they carry
    ``((1 + 2 eps)/n, 2 eps alpha/n)`` and ``((1 - 2 eps)/n, 6 eps alpha/n)``.

    Regime conditions (``m <= n/100``, ``eps < 0.1``, ``lam <= 1/2``) warn,
    or raise with ``strict=True``.  Parameters that make ``q`` negative are
    always rejected.  A draw is kept when both raw masses land in
    ``(0.9, 1.1)`` and, for ``X = 1``, ``tvd(p, U_n) >= far_ratio * eps``.
    """
    if X not in (0, 1):
        raise ValueError("X must be 0 or 1")
    if not 1 <= m <= n:
        raise ValueError("need 1 <= m <= n")
    if not 0.0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 1/2)")
    if not 0.0 < lam < 1.0:
        raise ValueError("lambda must lie in (0, 1)")
    alpha = lam / (1.0 - lam)
    heavy_q = 1.0 - 4.0 * eps * alpha
    if heavy_q < 0.0:
        raise ValueError(f"1 - 4 eps alpha = {heavy_q:.4g} < 0: the noise measure would be negative")
    _regime(m <= n / 100, f"m={m} exceeds n/100", strict)
    _regime(eps < 0.1, f"eps={eps} is not below 0.1", strict)
    _regime(lam <= 0.5, f"lambda={lam} exceeds 1/2", strict)

    rng = make_rng(seed, "instance-types")
    for attempt in range(1, max_attempts + 1):
        u = rng.random(n)
        heavy = u < m / n
        plus = ~heavy & (u < m / n + (n - m) / (2 * n))
        minus = ~heavy & ~plus
        p = np.full(n, 1.0 / n)
        q = np.full(n, 4.0 * eps * alpha / n)
        q[heavy] += heavy_q / m
        if X == 1:
            p[plus] = (1.0 + 2.0 * eps) / n
            p[minus] = (1.0 - 2.0 * eps) / n
            q[plus] = 2.0 * eps * alpha / n
            q[minus] = 6.0 * eps * alpha / n
        spec, sp, sq = _normalize(lam, p, q)
        lo, hi = NORM_RANGE
        if not (lo < sp < hi and lo < sq < hi):
            continue
        dist = tvd(spec.target, Pmf.uniform(n))
        if X == 1 and dist < far_ratio * eps:
            continue
        info = InstanceSpec(
            family="UniformityHard",
            n=n,
            params={"m": m, "eps": eps, "lambda": lam, "X": X, "seed": seed},
            ground_truth=GroundTruth.YES if X == 0 else GroundTruth.NO,
            distance=dist,
            norms={"p": sp, "q": sq},
            lam_effective=spec.lam,
            attempts=attempt,
            metadata={
                "alpha": alpha,
                "counts": {"H": int(heavy.sum()), "L+": int(plus.sum()), "L-": int(minus.sum())},
                "types": np.where(heavy, "h", np.where(plus, "l+", "l-")).tolist(),
            },
        )
        measures = {"p": Pmf(p, measure=True), "q": Pmf(q, measure=True)}
        return HardInstance((spec,), info, measures)
    raise RetryLimitExceeded(f"no acceptable draw in {max_attempts} attempts")


def gen_closeness_hard(
    n: int,
    m: int,
    eps: float,
    lam: float,
    X: int,
    seed: int = 0,
    *,
    strict: bool = False,
    max_attempts: int = 50,
    table_samples: Optional[float] = None,
) -> HardInstance:
    """Four-type hard instance for contaminated closeness testing.

    Types ``h_lam``, ``h``, ``l1``, ``l2`` have probabilities ``lam m/n``,
    ``(1 - lam) m/n`` and ``(n - m)/2n`` twice.  For ``X = 0`` the two
    targets coincide; for ``X = 1`` the light buckets of ``p2`` (and ``q2``)
    swap, which puts the targets ``eps`` apart in l1.  The expected pairwise
    collision table over ``Poi(table_samples)`` draws from each raw measure
    (default ``m``) is attached as metadata.
    """
    if X not in (0, 1):
        raise ValueError("X must be 0 or 1")
    if not 1 <= m < n:
        raise ValueError("need 1 <= m < n")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if not 0.0 < lam < 1.0:
        raise ValueError("lambda must lie in (0, 1)")
    if lam * m <= 0.5:
        raise ValueError("need lambda m > 1/2 so that every mass is at most 1")
    alpha = lam / (1.0 - lam)
    if eps * alpha > 1.0:
        raise ValueError("eps alpha > 1: the heavy noise mass would be negative")
    _regime(eps < 0.1, f"eps={eps} is not below 0.1", strict)
    _regime(lam <= 0.5, f"lambda={lam} exceeds 1/2", strict)
    _regime(m >= n ** (2.0 / 3.0) / lam, f"m={m} is below n^(2/3)/lambda", strict)

    rng = make_rng(seed, "instance-types")
    lo, hi = NORM_RANGE
    for attempt in range(1, max_attempts + 1):
        u = rng.random(n)
        c1 = lam * m / n
        c2 = m / n
        c3 = m / n + (n - m) / (2 * n)
        hl, h = u < c1, (u >= c1) & (u < c2)
        l1, l2 = (u >= c2) & (u < c3), u >= c3
        nm = n - m
        a = np.zeros(n)  # p1
        b = np.zeros(n)  # q1
        a[hl] = (1.0 - eps) / (2.0 * lam * m)
        a[h] = (1.0 - eps) / (2.0 * (1.0 - lam) * m)
        b[h] = (1.0 - eps * alpha) / ((1.0 - lam) * m)
        a[l1], b[l1] = 3.0 * eps / (2.0 * nm), alpha * eps / (2.0 * nm)
        a[l2], b[l2] = eps / (2.0 * nm), 3.0 * alpha * eps / (2.0 * nm)
        c, d = a.copy(), b.copy()  # p2, q2
        if X == 1:
            c[l1], d[l1] = eps / (2.0 * nm), 3.0 * alpha * eps / (2.0 * nm)
            c[l2], d[l2] = 3.0 * eps / (2.0 * nm), alpha * eps / (2.0 * nm)
        raw = {"p1": a, "q1": b, "p2": c, "q2": d}
        sums = {k: float(v.sum()) for k, v in raw.items()}
        if not all(lo < s < hi for s in sums.values()):
            continue
        s1, _, _ = _normalize(lam, a, b)
        s2, _, _ = _normalize(lam, c, d)
        measures = {k: Pmf(v, measure=True) for k, v in raw.items()}
        ms = float(m if table_samples is None else table_samples)
        info = InstanceSpec(
            family="ClosenessHard",
            n=n,
            params={"m": m, "eps": eps, "lambda": lam, "X": X, "seed": seed},
            ground_truth=GroundTruth.YES if X == 0 else GroundTruth.NO,
            distance=l1_distance(s1.target, s2.target),
            norms=sums,
            lam_effective=(s1.lam, s2.lam),
            attempts=attempt,
            metadata={
                "alpha": alpha,
                "counts": {
                    "H_lambda": int(hl.sum()),
                    "H": int(h.sum()),
                    "L1": int(l1.sum()),
                    "L2": int(l2.sum()),
                },
                "collision_table": closeness_collision_table(measures, ms),
                "table1": table1_formulas(n, ms, eps, X),
            },
        )
        return HardInstance((s1, s2), info, measures)
    raise RetryLimitExceeded(f"no acceptable draw in {max_attempts} attempts")


def _pair_key(a: str, b: str) -> str:
    return f"{a},{b}"


def closeness_collision_table(measures: dict, m: float) -> dict:
    """Exact expected collision counts over ``Poi(m a[i])`` draws per bucket.

    Diagonal cells count unordered pairs inside one sample set
    (``m^2 ||a||^2 / 2``); off-diagonal cells count cross pairs
    (``m^2 <a, b>``).
    """
    out = {}
    names = [k for k in _DIST_NAMES if k in measures]
    for i, x in enumerate(names):
        for y in names[i:]:
            dot = float(np.dot(measures[x].mass, measures[y].mass))
            out[_pair_key(x, y)] = m * m * dot / 2.0 if x == y else m * m * dot
    return out


def table1_formulas(n: int, m: float, eps: float, X: int) -> dict:
    """Expected pairwise collision counts as printed in the closeness overview table.

    These use its simplifications (``C(m, 2) ~ m^2/2``, ``1 - eps ~ 1``,
    ``n - m ~ n``) and are kept for reference next to the exact table.
    """
    base = m / 2.0
    hi = base + 5.0 * eps**2 * m**2 / (2.0 * n)
    lo = base + 3.0 * eps**2 * m**2 / (2.0 * n)
    shift = eps**2 * m**2 / n if X == 1 else 0.0
    cells = {
        ("p1", "p1"): hi, ("q1", "q1"): hi, ("p2", "p2"): hi, ("q2", "q2"): hi,
        ("p1", "q1"): lo, ("p2", "q2"): lo,
        ("p1", "p2"): hi - shift, ("q1", "q2"): hi - shift,
        ("p1", "q2"): lo + shift, ("q1", "p2"): lo + shift,
    }
    return {_pair_key(*k): v for k, v in cells.items()}


# --------------------------------------------------------------------------
# Poissonization

_POISSON_RNGS: "weakref.WeakKeyDictionary[Session, np.random.Generator]" = weakref.WeakKeyDictionary()


def _mixture_total(spec) -> float:
    if isinstance(spec, AdversarialSpec):
        return 1.0
    return spec.lam * spec.target.total + (1.0 - spec.lam) * spec.noise.total


def poissonize(session: Session, m: float, rng: Optional[np.random.Generator] = None) -> SampleSet:
    """Draw ``Poi(m ||r||_1)`` samples from ``session`` in one batch.

    Given the total, draws are i.i.d. from ``r / ||r||_1``, so the bucket
    counts are independent ``Poi(m r[i])`` variables.  The count comes from
    a per-session named stream unless ``rng`` is given.
    """
    if m < 0:
        raise ValueError("m must be non-negative")
    if rng is None:
        rng = _POISSON_RNGS.get(session)
        if rng is None:
            rng = make_rng(getattr(session, "seed", 0), "poissonize")
            _POISSON_RNGS[session] = rng
    mean = m * _mixture_total(session.spec)
    k = int(rng.poisson(mean)) if mean > 0 else 0
    return session.draw(k)


# --------------------------------------------------------------------------
# Dispatcher used by the harness and CLI


def _random_noise(n: int, rng: np.random.Generator) -> Pmf:
    return Pmf(rng.dirichlet(np.ones(n)))


def build_instance(
    family: str,
    n: int,
    eps: float = 0.0,
    lam: float = 1.0,
    *,
    m: Optional[int] = None,
    X: int = 0,
    seed: int = 0,
    noise: str = "dirichlet",
    strict: bool = False,
) -> HardInstance:
    """Uniform construction entry point for every family.

    ``Uniform`` pairs ``p = U_n`` with a noise pmf chosen by ``noise``
    (``dirichlet``, ``uniform`` or ``point``); ``Paninski`` uses the same
    noise with the Paninski target; ``MaskedFar`` masks the Paninski target
    (``eps = 0`` masks the uniform one); the hard families forward to their
    generators.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    params = {"eps": eps, "lambda": lam, "seed": seed}
    if family == "UniformityHard":
        if m is None:
            raise ValueError("UniformityHard needs m")
        return gen_uniformity_hard(n, m, eps, lam, X, seed, strict=strict)
    if family == "ClosenessHard":
        if m is None:
            raise ValueError("ClosenessHard needs m")
        return gen_closeness_hard(n, m, eps, lam, X, seed, strict=strict)
    if family == "MaskedFar":
        spec = gen_masked_far(n, eps, lam)
    else:
        p = Pmf.uniform(n) if family == "Uniform" else gen_paninski(n, eps)
        rng = make_rng(seed, "instance-noise")
        if noise == "dirichlet":
            q = _random_noise(n, rng)
        elif noise == "uniform":
            q = Pmf.uniform(n)
        elif noise == "point":
            q = Pmf.point(n, 0)
        else:
            raise ValueError(f"unknown noise kind {noise!r}")
        spec = MixtureSpec(lam, p, q)
        params["noise"] = noise
    dist = tvd(spec.target, Pmf.uniform(n))
    info = InstanceSpec(
        family=family,
        n=n,
        params=params,
        ground_truth=GroundTruth.YES if dist == 0.0 else GroundTruth.NO,
        distance=dist,
        norms={"p": 1.0, "q": 1.0},
        lam_effective=spec.lam,
    )
    return HardInstance((spec,), info)
