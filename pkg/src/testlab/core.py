"""Probability mass functions and contaminated-sample oracles.

Two oracle backends share one interface:

* ``LogSession`` keeps every drawn sample (value and hidden label) in an
  append-only log.  Verifying a sample looks its label up by id.
* ``CountSession`` keeps only the histogram of drawn values, split into the
  relevant and irrelevant parts.  Verifying a uniformly random member of a
  bucket is an exact binomial draw, because samples inside one bucket are
  exchangeable.  This backend makes the very large sample budgets used by
  the query-optimal testers affordable while charging the same counters.

Testers only see ``SampleSet`` objects (the drawn multiset) and the session
counters.  Hidden labels are reachable through :class:`GroundTruthProbe`,
which only the harness and the tests use.
"""

from __future__ import annotations

import enum
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "AdversarialSpec",
    "AdversaryContext",
    "ADVERSARIES",
    "CountSession",
    "CountSet",
    "EstimationFailure",
    "GroundTruth",
    "GroundTruthProbe",
    "Label",
    "LogSession",
    "LogSet",
    "MixtureSpec",
    "Pmf",
    "SampleSet",
    "Semantics",
    "Session",
    "TrialRecord",
    "Verdict",
    "draw_sample",
    "l2_norm_sq",
    "make_rng",
    "open_session",
    "tvd",
    "verify_sample",
]

_SUM_TOL = 1e-9
_CHUNK = 1 << 20
# Above this many trials a logged set answers a verification batch from its
# per-bucket label counts instead of touching individual ids.  The result has
# the same distribution because members of one bucket are exchangeable.
_AGGREGATE_MIN = 1 << 14


class Label(enum.Enum):
    RELEVANT = "Relevant"
    IRRELEVANT = "Irrelevant"


class Verdict(str, enum.Enum):
    ACCEPT = "Accept"
    REJECT = "Reject"
    FAIL = "Fail"


class GroundTruth(str, enum.Enum):
    YES = "Yes"
    NO = "No"


class Semantics(str, enum.Enum):
    PER_SAMPLE_BERNOULLI = "PerSampleBernoulli"
    BUDGET_FRACTION = "BudgetFraction"


class EstimationFailure(RuntimeError):
    """A declared error path of a tester or estimator (recorded as ``Fail``)."""


# --------------------------------------------------------------------------
# Randomness


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, name: str) -> np.random.Generator:
    """Independent Philox stream for ``(seed, name)``.

    Different names give statistically independent streams, so adding a new
    consumer never perturbs an existing one.
    """
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=(_name_key(name),))
    return np.random.Generator(np.random.Philox(ss))


def child_rng(rng: np.random.Generator, name: str) -> np.random.Generator:
    """Derive a named child stream from an existing generator."""
    seed = int(rng.integers(0, 2**63 - 1))
    return make_rng(seed, name)


# --------------------------------------------------------------------------
# Pmf


@dataclass(frozen=True, eq=False)
class Pmf:
    """Non-negative mass function on ``{0, ..., n-1}``.

    With ``measure=False`` the entries must sum to one (within 1e-9).  With
    ``measure=True`` the object is a non-negative measure whose total lies in
    ``(0.5, 2)``, as needed by the Poissonized hard instances.
    """

    mass: np.ndarray
    measure: bool = False

    def __post_init__(self) -> None:
        arr = np.array(self.mass, dtype=np.float64).reshape(-1)
        if arr.size < 1:
            raise ValueError("Pmf needs n >= 1")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("Pmf entries must be finite and non-negative")
        total = float(arr.sum())
        if self.measure:
            if not 0.5 < total < 2.0:
                raise ValueError(f"measure total {total} outside (0.5, 2)")
        elif abs(total - 1.0) > _SUM_TOL:
            raise ValueError(f"Pmf sums to {total}, expected 1")
        arr.setflags(write=False)
        object.__setattr__(self, "mass", arr)

    @property
    def n(self) -> int:
        return int(self.mass.size)

    @property
    def total(self) -> float:
        return float(self.mass.sum())

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i):
        return self.mass[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pmf):
            return NotImplemented
        return self.measure == other.measure and np.array_equal(self.mass, other.mass)

    def __hash__(self) -> int:
        return hash((self.measure, self.mass.tobytes()))

    def normalized(self) -> "Pmf":
        return Pmf(self.mass / self.mass.sum())

    @classmethod
    def uniform(cls, n: int) -> "Pmf":
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def point(cls, n: int, i: int) -> "Pmf":
        arr = np.zeros(n)
        arr[i] = 1.0
        return cls(arr)

    @classmethod
    def from_counts(cls, counts) -> "Pmf":
        c = np.asarray(counts, dtype=np.float64)
        return cls(c / c.sum())

    def to_dict(self) -> dict:
        d = {"n": self.n, "mass": self.mass.tolist()}
        if self.measure:
            d["measure"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Pmf":
        mass = d["mass"]
        if len(mass) != int(d["n"]):
            raise ValueError("Pmf JSON: n does not match len(mass)")
        return cls(np.asarray(mass, dtype=np.float64), measure=bool(d.get("measure", False)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Pmf":
        return cls.from_dict(json.loads(text))


def _check_same_n(a: Pmf, b: Pmf) -> None:
    if a.n != b.n:
        raise ValueError(f"domain size mismatch: {a.n} vs {b.n}")


def tvd(a: Pmf, b: Pmf) -> float:
    """Total variation distance, half the l1 distance."""
    _check_same_n(a, b)
    return 0.5 * float(np.abs(a.mass - b.mass).sum())


def l1_distance(a: Pmf, b: Pmf) -> float:
    _check_same_n(a, b)
    return float(np.abs(a.mass - b.mass).sum())


def l2_norm_sq(a: Pmf) -> float:
    return float(np.dot(a.mass, a.mass))


class _Sampler:
    """Inverse-cdf sampler over a non-negative weight vector."""

    def __init__(self, weights: np.ndarray):
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        if total <= 0:
            raise ValueError("cannot sample from zero mass")
        self.cdf = np.cumsum(w / total)
        self.last = int(np.flatnonzero(w > 0)[-1])

    def sample(self, k: int, rng: np.random.Generator) -> np.ndarray:
        if k == 0:
            return np.zeros(0, dtype=np.int64)
        idx = np.searchsorted(self.cdf, rng.random(k), side="right")
        np.minimum(idx, self.last, out=idx)
        return idx.astype(np.int64, copy=False)


def _safe_pvals(w: np.ndarray) -> np.ndarray:
    p = np.asarray(w, dtype=np.float64)
    p = p / p.sum()
    return p


def multinomial(k: int, weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Multinomial(k, weights / sum(weights)) as an int64 vector."""
    out = np.zeros(len(weights), dtype=np.int64)
    if k == 0:
        return out
    pos = np.flatnonzero(np.asarray(weights) > 0)
    if pos.size == 1:
        out[pos[0]] = k
        return out
    out[pos] = rng.multinomial(int(k), _safe_pvals(np.asarray(weights)[pos]))
    return out


# --------------------------------------------------------------------------
# Specs


@dataclass(frozen=True)
class MixtureSpec:
    """Distributional contamination ``r = lam * p + (1 - lam) * q``."""

    lam: float
    target: Pmf
    noise: Pmf

    def __post_init__(self) -> None:
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("lambda must lie in (0, 1]")
        _check_same_n(self.target, self.noise)

    @property
    def n(self) -> int:
        return self.target.n

    @property
    def mixture(self) -> Pmf:
        mass = self.lam * self.target.mass + (1.0 - self.lam) * self.noise.mass
        measure = self.target.measure or self.noise.measure
        return Pmf(mass, measure=measure)

    @property
    def relevant_fraction(self) -> float:
        """Probability that one draw is relevant (``lam`` for distributions)."""
        wp = self.lam * self.target.total
        wq = (1.0 - self.lam) * self.noise.total
        return wp / (wp + wq)

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "target": self.target.to_dict(), "noise": self.noise.to_dict()}

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "MixtureSpec":
        def load(x):
            if isinstance(x, str):
                import os

                with open(os.path.join(base_dir, x)) as fh:
                    return Pmf.from_dict(json.load(fh))
            return Pmf.from_dict(x)

        return cls(float(d["lambda"]), load(d["target"]), load(d["noise"]))


@dataclass
class AdversaryContext:
    n: int
    target: Pmf
    total_drawn: int
    rng: np.random.Generator


Adversary = Callable[[np.ndarray, np.ndarray, AdversaryContext], Sequence[int]]


def _adv_honest(honest, slots, ctx):
    return _Sampler(ctx.target.mass).sample(len(slots), ctx.rng)


def _adv_point_mass(honest, slots, ctx):
    return np.zeros(len(slots), dtype=np.int64)


def _adv_block(honest, slots, ctx):
    width = max(1, min(ctx.n, 10 * ctx.total_drawn))
    return ctx.rng.integers(0, width, size=len(slots))


def _adv_mimic(honest, slots, ctx):
    if len(honest) == 0:
        return _adv_honest(honest, slots, ctx)
    return honest[ctx.rng.integers(0, len(honest), size=len(slots))]


ADVERSARIES: dict[str, Adversary] = {
    "honest": _adv_honest,
    "point-mass": _adv_point_mass,
    "10m-block": _adv_block,
    "frequency-mimic": _adv_mimic,
}


@dataclass(frozen=True)
class AdversarialSpec:
    """Adversarial contamination.

    ``adversary`` is either a registry name or a callable
    ``(honest_values, slot_ids, ctx) -> values``.  It runs once per draw batch,
    after every honest value of that batch (and of earlier batches) is fixed.
    """

    lam: float
    target: Pmf
    adversary: Union[str, Adversary] = "honest"
    semantics: Semantics = Semantics.PER_SAMPLE_BERNOULLI

    def __post_init__(self) -> None:
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("lambda must lie in (0, 1]")
        if isinstance(self.adversary, str) and self.adversary not in ADVERSARIES:
            raise ValueError(f"unknown adversary {self.adversary!r}")
        object.__setattr__(self, "semantics", Semantics(self.semantics))

    @property
    def n(self) -> int:
        return self.target.n

    @property
    def strategy(self) -> Adversary:
        if isinstance(self.adversary, str):
            return ADVERSARIES[self.adversary]
        return self.adversary


@dataclass
class TrialRecord:
    verdict: Verdict
    ground_truth: GroundTruth
    samples_used: int
    queries_used: int
    elapsed: float
    extra: dict = field(default_factory=dict)

    @property
    def correct(self) -> bool:
        want = Verdict.ACCEPT if self.ground_truth is GroundTruth.YES else Verdict.REJECT
        return self.verdict is want

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "ground_truth": self.ground_truth.value,
            "samples_used": self.samples_used,
            "queries_used": self.queries_used,
            "elapsed": self.elapsed,
            **({"extra": self.extra} if self.extra else {}),
        }


# --------------------------------------------------------------------------
# Sample sets


def pairs(x: np.ndarray) -> np.ndarray:
    """Elementwise C(x, 2) as float64 (safe for very large counts)."""
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def exact_pairs(counts: np.ndarray) -> int:
    """Exact sum of C(c, 2) as a Python integer."""
    c = np.asarray(counts, dtype=np.int64)
    c = c[c > 1]
    if c.size == 0:
        return 0
    if c.max() < 3_000_000_000:
        per = c * (c - 1) // 2
        if float(per.sum(dtype=np.float64)) < 9e18:
            return int(per.sum())
    return sum(int(v) * (int(v) - 1) // 2 for v in c)


def exact_choose(counts: np.ndarray, c: int) -> int:
    return sum(math.comb(int(v), c) for v in np.asarray(counts) if v >= c)


def exact_cross(a: np.ndarray, b: np.ndarray) -> int:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    nz = (a > 0) & (b > 0)
    if not nz.any():
        return 0
    prod_max = float(a[nz].max()) * float(b[nz].max()) * nz.sum()
    if prod_max < 9e18:
        return int((a[nz] * b[nz]).sum())
    return sum(int(x) * int(y) for x, y in zip(a[nz], b[nz]))


def _binomial(t, p, rng):
    """Binomial draws tolerant of p slightly outside [0, 1] and huge t."""
    p = np.clip(p, 0.0, 1.0)
    return rng.binomial(t, p)


def _aggregate_collisions(r: np.ndarray, p: np.ndarray, t: int, rng) -> int:
    w = pairs(r)
    per = multinomial(int(t), w, rng)
    nz = per > 0
    return int(_binomial(per[nz], pairs(p[nz]) / w[nz], rng).sum())


def _aggregate_cross(r1, p1, r2, p2, w, t: int, rng) -> int:
    per = multinomial(int(t), w, rng)
    nz = per > 0
    prob = (p1[nz] / r1[nz]) * (p2[nz] / r2[nz])
    return int(_binomial(per[nz], prob, rng).sum())


class SampleSet:
    """A drawn multiset over ``[n]`` tied to the session that produced it.

    All ``verify_*`` methods charge the owning session exactly one query per
    verified sample (two per verified collision).
    """

    n: int
    session: "Session"

    # Observable statistics -------------------------------------------------
    def counts(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def size(self) -> int:
        raise NotImplementedError

    def __len__(self) -> int:
        return self.size

    def collision_count(self, subset: Optional[np.ndarray] = None) -> int:
        """Exact number of unordered colliding pairs (optionally within ``subset``)."""
        c = self.counts()
        if subset is not None:
            c = c * _mask(subset, self.n)
        return exact_pairs(c)

    def cross_count(self, other: "SampleSet", subset=None) -> int:
        a, b = self.counts(), other.counts()
        if subset is not None:
            m = _mask(subset, self.n)
            a, b = a * m, b * m
        return exact_cross(a, b)

    # Queries -----------------------------------------------------------------
    def verify_uniform(self, t: int, rng: np.random.Generator) -> int:
        """Verify ``t`` uniformly random members (with replacement); return #relevant."""
        raise NotImplementedError

    def verify_in_bucket(self, value: int, t: int, rng: np.random.Generator) -> int:
        """Verify ``t`` uniformly random members equal to ``value``; return #relevant."""
        raise NotImplementedError

    def verify_collisions(self, t: int, rng: np.random.Generator, subset=None) -> int:
        """Verify both ends of ``t`` uniformly random colliding pairs.

        Returns the number of pairs with both samples relevant.
        """
        raise NotImplementedError

    def verify_cross(self, other: "SampleSet", t: int, rng: np.random.Generator, subset=None) -> int:
        raise NotImplementedError

    def verify_all(self) -> np.ndarray:
        """Verify every member once; return the per-value relevant counts."""
        raise NotImplementedError

    # Restructuring -------------------------------------------------------------
    def split(self, prob: float, rng: np.random.Generator) -> tuple["SampleSet", "SampleSet"]:
        """Route each member independently to the first part with ``prob``."""
        raise NotImplementedError

    def transport(self, dmap, rng: np.random.Generator) -> "SampleSet":
        """Apply a randomized domain map to every member."""
        raise NotImplementedError

    def restrict(self, subset) -> "SampleSet":
        """Members whose value lies in ``subset`` (values keep their labels)."""
        raise NotImplementedError


def _mask(subset, n: int) -> np.ndarray:
    subset = np.asarray(subset)
    if subset.dtype == bool:
        return subset.astype(np.int64)
    m = np.zeros(n, dtype=np.int64)
    m[subset] = 1
    return m


class LogSet(SampleSet):
    """Explicit list of sample ids with their (possibly transported) values."""

    def __init__(self, session: "LogSession", ids: np.ndarray, values: np.ndarray, n: int):
        self.session = session
        self.ids = np.asarray(ids, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.int64)
        self.n = int(n)
        self._counts = None
        self._order = None
        self._starts = None

    @property
    def size(self) -> int:
        return int(self.ids.size)

    def counts(self) -> np.ndarray:
        if self._counts is None:
            self._counts = np.bincount(self.values, minlength=self.n).astype(np.int64)
        return self._counts

    def _groups(self):
        if self._order is None:
            self._order = np.argsort(self.values, kind="stable")
            self._starts = np.concatenate(([0], np.cumsum(self.counts())))
        return self._order, self._starts

    def members(self, value: int) -> np.ndarray:
        order, starts = self._groups()
        return self.ids[order[starts[value] : starts[value + 1]]]

    def _verify(self, ids: np.ndarray) -> np.ndarray:
        return self.session._verify_ids(ids)

    def _rel_counts(self) -> np.ndarray:
        """Per-bucket relevant counts.  Oracle-internal; used to answer large batches."""
        labs = self.session._labels[self.ids]
        return np.bincount(self.values[labs], minlength=self.n).astype(np.int64)

    def _charge(self, k: int) -> None:
        self.session.queries_used += int(k)

    def verify_uniform(self, t, rng):
        if t <= 0:
            return 0
        if self.size == 0:
            raise ValueError("cannot verify members of an empty sample set")
        if t >= self.session._aggregate_min:
            self._charge(t)
            hits = int(_binomial(int(t), int(self._rel_counts().sum()) / self.size, rng))
            return self.session._after_aggregate(hits, t, 1, rng)
        hits = 0
        for lo in range(0, t, _CHUNK):
            k = min(_CHUNK, t - lo)
            idx = rng.integers(0, self.size, size=k)
            hits += int(self._verify(self.ids[idx]).sum())
        return hits

    def verify_in_bucket(self, value, t, rng):
        if t <= 0:
            return 0
        mem = self.members(value)
        if mem.size == 0:
            raise ValueError(f"bucket {value} is empty")
        if t >= self.session._aggregate_min:
            self._charge(t)
            rel = int(self.session._labels[mem].sum())
            return self.session._after_aggregate(int(_binomial(int(t), rel / mem.size, rng)), t, 1, rng)
        return int(self._verify(mem[rng.integers(0, mem.size, size=t)]).sum())

    def _pair_sampler(self, weights):
        return _Sampler(weights)

    def verify_collisions(self, t, rng, subset=None):
        if t <= 0:
            return 0
        c = self.counts()
        if subset is not None:
            c = c * _mask(subset, self.n)
        w = pairs(c)
        if w.sum() == 0:
            raise ValueError("no collisions to verify")
        if t >= self.session._aggregate_min:
            self._charge(2 * t)
            p = self._rel_counts()
            if subset is not None:
                p = p * _mask(subset, self.n)
            return self.session._after_aggregate(_aggregate_collisions(c, p, t, rng), t, 2, rng)
        order, starts = self._groups()
        sampler = _Sampler(w)
        hits = 0
        for lo in range(0, t, _CHUNK):
            k = min(_CHUNK, t - lo)
            b = sampler.sample(k, rng)
            sz = c[b]
            a = (rng.random(k) * sz).astype(np.int64)
            o = (rng.random(k) * (sz - 1)).astype(np.int64)
            o = o + (o >= a)
            ia = self.ids[order[starts[b] + a]]
            ib = self.ids[order[starts[b] + o]]
            la = self._verify(ia)
            lb = self._verify(ib)
            hits += int((la & lb).sum())
        return hits

    def verify_cross(self, other, t, rng, subset=None):
        if t <= 0:
            return 0
        if not isinstance(other, LogSet):
            raise TypeError("cross verification needs two sample sets of the same backend")
        a, b = self.counts(), other.counts()
        w = a.astype(np.float64) * b
        if subset is not None:
            w = w * _mask(subset, self.n)
        if w.sum() == 0:
            raise ValueError("no cross collisions to verify")
        if t >= self.session._aggregate_min:
            self._charge(t)
            other._charge(t)
            hits = _aggregate_cross(a, self._rel_counts(), b, other._rel_counts(), w, t, rng)
            hits = self.session._after_aggregate(hits, t, 1, rng)
            return other.session._after_aggregate(hits, t, 1, rng)
        o1, s1 = self._groups()
        o2, s2 = other._groups()
        sampler = _Sampler(w)
        hits = 0
        for lo in range(0, t, _CHUNK):
            k = min(_CHUNK, t - lo)
            v = sampler.sample(k, rng)
            i1 = (rng.random(k) * a[v]).astype(np.int64)
            i2 = (rng.random(k) * b[v]).astype(np.int64)
            la = self._verify(self.ids[o1[s1[v] + i1]])
            lb = other._verify(other.ids[o2[s2[v] + i2]])
            hits += int((la & lb).sum())
        return hits

    def verify_all(self):
        labs = self._verify(self.ids)
        return np.bincount(self.values[labs], minlength=self.n).astype(np.int64)

    def split(self, prob, rng):
        mask = rng.random(self.size) < prob
        return (
            LogSet(self.session, self.ids[mask], self.values[mask], self.n),
            LogSet(self.session, self.ids[~mask], self.values[~mask], self.n),
        )

    def transport(self, dmap, rng):
        if dmap.source_n != self.n:
            raise ValueError("map source size does not match sample domain")
        return LogSet(self.session, self.ids, dmap.transport(self.values, rng), dmap.target_n)

    def restrict(self, subset):
        keep = _mask(subset, self.n).astype(bool)[self.values]
        return LogSet(self.session, self.ids[keep], self.values[keep], self.n)

    def concat(self, other: "LogSet") -> "LogSet":
        if other.session is not self.session or other.n != self.n:
            raise ValueError("can only concatenate sets from one session and domain")
        return LogSet(
            self.session, np.concatenate([self.ids, other.ids]), np.concatenate([self.values, other.values]), self.n
        )


class CountSet(SampleSet):
    """Histogram of a drawn multiset with the hidden relevant histogram."""

    def __init__(self, session: "CountSession", total: np.ndarray, relevant: np.ndarray):
        self.session = session
        self._r = np.asarray(total, dtype=np.int64)
        self._p = np.asarray(relevant, dtype=np.int64)
        self.n = int(self._r.size)

    @property
    def size(self) -> int:
        return int(self._r.sum())

    def counts(self) -> np.ndarray:
        return self._r

    def _charge(self, k: int) -> None:
        self.session._charge(int(k))

    def verify_uniform(self, t, rng):
        if t <= 0:
            return 0
        tot = self._r.sum()
        if tot == 0:
            raise ValueError("cannot verify members of an empty sample set")
        self._charge(t)
        return int(_binomial(int(t), self._p.sum() / tot, rng))

    def verify_in_bucket(self, value, t, rng):
        if t <= 0:
            return 0
        r = self._r[value]
        if r == 0:
            raise ValueError(f"bucket {value} is empty")
        self._charge(t)
        return int(_binomial(int(t), self._p[value] / r, rng))

    def verify_collisions(self, t, rng, subset=None):
        if t <= 0:
            return 0
        r, p = self._r, self._p
        if subset is not None:
            m = _mask(subset, self.n)
            r, p = r * m, p * m
        if pairs(r).sum() == 0:
            raise ValueError("no collisions to verify")
        self._charge(2 * t)
        return _aggregate_collisions(r, p, t, rng)

    def verify_cross(self, other, t, rng, subset=None):
        if t <= 0:
            return 0
        if not isinstance(other, CountSet):
            raise TypeError("cross verification needs two sample sets of the same backend")
        r1, r2 = self._r.astype(np.float64), other._r.astype(np.float64)
        w = r1 * r2
        if subset is not None:
            w = w * _mask(subset, self.n)
        if w.sum() == 0:
            raise ValueError("no cross collisions to verify")
        self._charge(t)
        other._charge(t)
        return _aggregate_cross(r1, self._p, r2, other._p, w, t, rng)

    def verify_all(self):
        self._charge(self.size)
        return self._p.copy()

    def split(self, prob, rng):
        pa = _binomial(self._p, prob, rng)
        qa = _binomial(self._r - self._p, prob, rng)
        ra = pa + qa
        return CountSet(self.session, ra, pa), CountSet(self.session, self._r - ra, self._p - pa)

    def transport(self, dmap, rng):
        if dmap.source_n != self.n:
            raise ValueError("map source size does not match sample domain")
        p2 = dmap.transport_counts(self._p, rng)
        q2 = dmap.transport_counts(self._r - self._p, rng)
        return CountSet(self.session, p2 + q2, p2)

    def restrict(self, subset):
        m = _mask(subset, self.n)
        return CountSet(self.session, self._r * m, self._p * m)

    def concat(self, other: "CountSet") -> "CountSet":
        if other.session is not self.session or other.n != self.n:
            raise ValueError("can only concatenate sets from one session and domain")
        return CountSet(self.session, self._r + other._r, self._p + other._p)


# --------------------------------------------------------------------------
# Sessions


class Session:
    """Common accounting for both backends."""

    n: int
    samples_used: int
    queries_used: int
    spec: Union[MixtureSpec, AdversarialSpec]

    def draw(self, k: int) -> SampleSet:
        raise NotImplementedError

    def draw_until_relevant(self, want: int, cap: int) -> tuple[np.ndarray, int]:
        """Draw and verify fresh samples until ``want`` are relevant.

        Returns the values of the relevant samples (in draw order) and the
        number drawn.  Raises :class:`EstimationFailure` once ``cap`` samples
        have been drawn without reaching ``want``.  Each draw is verified
        exactly once.
        """
        got: list[np.ndarray] = []
        have = 0
        drawn = 0
        while have < want:
            k = min(want - have, cap - drawn)
            if k <= 0:
                raise EstimationFailure("verify-until-relevant budget exhausted")
            s = self.draw(k)
            drawn += k
            rel = s.verify_all()
            vals = np.repeat(np.arange(s.n), rel)
            self._order_rng.shuffle(vals)
            got.append(vals)
            have += int(rel.sum())
        return np.concatenate(got) if got else np.zeros(0, dtype=np.int64), drawn


class LogSession(Session):
    """Per-sample log backend (supports distributional and adversarial specs)."""

    # Batches at least this large are answered from the bucket totals.
    _aggregate_min = _AGGREGATE_MIN

    def __init__(self, spec, seed: int):
        self.spec = spec
        self.seed = int(seed)
        self.n = spec.n
        self._rng_sampling = make_rng(seed, "sampling")
        self._rng_labels = make_rng(seed, "labels")
        self._rng_adv = make_rng(seed, "adversary")
        self._order_rng = make_rng(seed, "order")
        cap = 1024
        self._values = np.zeros(cap, dtype=np.int64)
        self._labels = np.zeros(cap, dtype=bool)
        self._len = 0
        # Samples accounted for but never materialized (see ReducedSession).
        self._phantom = 0
        self.queries_used = 0
        self._corrupted = 0
        if isinstance(spec, MixtureSpec):
            self._sp = _Sampler(spec.target.mass)
            self._sq = _Sampler(spec.noise.mass) if spec.noise.total > 0 and spec.lam < 1 else None
            self._frac = spec.relevant_fraction
        else:
            self._sp = _Sampler(spec.target.mass)
            self._sq = None
            self._frac = spec.lam

    @property
    def samples_used(self) -> int:
        return self._len + self._phantom

    def _after_aggregate(self, hits: int, t: int, per_trial: int, rng) -> int:
        """Post-process an aggregated batch answer; identity for a plain log."""
        return hits

    def _grow(self, need: int) -> None:
        cap = self._values.size
        if need <= cap:
            return
        new = max(need, 2 * cap)
        v = np.zeros(new, dtype=np.int64)
        l = np.zeros(new, dtype=bool)
        v[: self._len] = self._values[: self._len]
        l[: self._len] = self._labels[: self._len]
        self._values, self._labels = v, l

    def _draw_raw(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        spec = self.spec
        if isinstance(spec, MixtureSpec):
            labels = self._rng_labels.random(k) < self._frac
            values = np.empty(k, dtype=np.int64)
            kp = int(labels.sum())
            values[labels] = self._sp.sample(kp, self._rng_sampling)
            if k - kp:
                values[~labels] = self._sq.sample(k - kp, self._rng_sampling)
            return values, labels
        # Adversarial: fix the corruption mask and honest values first.
        if spec.semantics is Semantics.PER_SAMPLE_BERNOULLI:
            corrupt = self._rng_labels.random(k) >= spec.lam
        else:
            allowed = math.floor((1.0 - spec.lam) * (self._len + k) + 1e-9) - self._corrupted
            c = max(0, min(k, allowed))
            corrupt = np.zeros(k, dtype=bool)
            if c:
                corrupt[self._rng_labels.choice(k, size=c, replace=False)] = True
        labels = ~corrupt
        values = np.empty(k, dtype=np.int64)
        values[labels] = self._sp.sample(int(labels.sum()), self._rng_sampling)
        n_bad = int(corrupt.sum())
        if n_bad:
            prior = self._values[: self._len][self._labels[: self._len]]
            honest_all = np.concatenate([prior, values[labels]])
            slots = self._len + np.flatnonzero(corrupt)
            ctx = AdversaryContext(self.n, spec.target, self._len + k, self._rng_adv)
            out = np.asarray(spec.strategy(honest_all, slots, ctx), dtype=np.int64).reshape(-1)
            if out.size != n_bad:
                raise ValueError("adversary returned the wrong number of values")
            if out.size and (out.min() < 0 or out.max() >= self.n):
                raise ValueError("adversary returned values outside the domain")
            values[corrupt] = out
            self._corrupted += n_bad
        return values, labels

    def draw(self, k: int) -> LogSet:
        k = int(k)
        if k < 0:
            raise ValueError("k must be non-negative")
        self._grow(self._len + k)
        values, labels = self._draw_raw(k)
        start = self._len
        self._values[start : start + k] = values
        self._labels[start : start + k] = labels
        self._len += k
        ids = np.arange(start, start + k, dtype=np.int64)
        return LogSet(self, ids, values, self.n)

    def draw_sample(self) -> tuple[int, int]:
        s = self.draw(1)
        return int(s.ids[0]), int(s.values[0])

    def _verify_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self._len):
            raise KeyError("unknown sample id")
        self.queries_used += int(ids.size)
        return self._labels[ids]

    def verify(self, sample_id: int) -> Label:
        ok = bool(self._verify_ids(np.array([sample_id]))[0])
        return Label.RELEVANT if ok else Label.IRRELEVANT

    def log(self) -> list[tuple[int, Label]]:
        """Snapshot of the full log (ground truth; not for tester code)."""
        return [
            (int(v), Label.RELEVANT if l else Label.IRRELEVANT)
            for v, l in zip(self._values[: self._len], self._labels[: self._len])
        ]


class CountSession(Session):
    """Histogram backend for distributional specs."""

    def __init__(self, spec: MixtureSpec, seed: int):
        if not isinstance(spec, MixtureSpec):
            raise TypeError("the count backend supports distributional specs only")
        self.spec = spec
        self.seed = int(seed)
        self.n = spec.n
        self._rng_sampling = make_rng(seed, "sampling")
        self._rng_labels = make_rng(seed, "labels")
        self._order_rng = make_rng(seed, "order")
        self._frac = spec.relevant_fraction
        self._pw = spec.target.mass
        self._qw = spec.noise.mass
        self.samples_used = 0
        self.queries_used = 0

    def _charge(self, k: int) -> None:
        self.queries_used += k

    def draw(self, k: int) -> CountSet:
        k = int(k)
        if k < 0:
            raise ValueError("k must be non-negative")
        kp = int(self._rng_labels.binomial(k, self._frac)) if self._frac < 1 else k
        p = multinomial(kp, self._pw, self._rng_sampling)
        q = multinomial(k - kp, self._qw, self._rng_sampling) if k - kp else np.zeros(self.n, dtype=np.int64)
        self.samples_used += k
        return CountSet(self, p + q, p)


def open_session(spec, seed: int, backend: str = "log") -> Session:
    """Open a fresh oracle session with zeroed counters.

    ``backend`` is ``"log"`` (per-sample log, default) or ``"counts"``
    (histogram backend; distributional specs only).
    """
    if backend == "log":
        return LogSession(spec, seed)
    if backend == "counts":
        return CountSession(spec, seed)
    raise ValueError(f"unknown backend {backend!r}")


def draw_sample(session: LogSession) -> tuple[int, int]:
    return session.draw_sample()


def verify_sample(session: LogSession, sample_id: int) -> Label:
    return session.verify(sample_id)


class GroundTruthProbe:
    """Harness-only access to hidden provenance.  Tester code never uses it."""

    @staticmethod
    def relevant_counts(s: SampleSet) -> np.ndarray:
        if isinstance(s, CountSet):
            return s._p.copy()
        labs = s.session._labels[s.ids]
        return np.bincount(s.values[labs], minlength=s.n).astype(np.int64)

    @staticmethod
    def relevant_size(s: SampleSet) -> int:
        return int(GroundTruthProbe.relevant_counts(s).sum())

    @staticmethod
    def labels(s: LogSet) -> np.ndarray:
        return s.session._labels[s.ids].copy()

    @staticmethod
    def relevant_subset(s: SampleSet) -> SampleSet:
        """The relevant part of ``s`` as a sample set (labels all Relevant)."""
        if isinstance(s, CountSet):
            return CountSet(s.session, s._p.copy(), s._p.copy())
        labs = s.session._labels[s.ids]
        return LogSet(s.session, s.ids[labs], s.values[labs], s.n)
