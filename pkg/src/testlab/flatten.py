"""Randomized domain maps: splitting, unifying and the identity reduction.

A :class:`DomainMap` is a Markov kernel from ``[source_n]`` to
``[target_n]``.  It can be evaluated three ways, which always agree in
distribution:

* ``transport(values, rng)`` moves individual samples;
* ``transport_counts(counts, rng)`` moves a histogram;
* ``pushforward(pmf)`` computes the image measure analytically.

Maps hold no hidden randomness beyond their tables, so they serialize to
JSON and replay exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import EstimationFailure, Pmf, SampleSet, Session, multinomial

__all__ = [
    "ComposedMap",
    "DomainMap",
    "IdentityMap",
    "MappedSession",
    "SplitMap",
    "UnifierMap",
    "adversarial_flatten",
    "high_sample_flatten",
    "high_sample_flatten_pair",
    "identity_reduction",
    "map_from_json",
    "mixture_flatten",
    "mixture_flatten_pair",
    "split_map",
    "unify_map",
]

K_FLATTEN = 1000.0
OVERFLOW_FACTOR = 10.0


def uniform_split_counts(counts: np.ndarray, sizes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Spread ``counts[i]`` uniformly over ``sizes[i]`` consecutive cells.

    Returns a vector of length ``sizes.sum()``.  Each segment is split by
    recursive halving with binomial draws, which is an exact multinomial with
    equal cell probabilities and is vectorized across segments.
    """
    counts = np.asarray(counts, dtype=np.int64)
    sizes = np.asarray(sizes, dtype=np.int64)
    offsets = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    out = np.zeros(int(sizes.sum()), dtype=np.int64)
    live = counts > 0
    c, s, o = counts[live], sizes[live], offsets[live]
    while c.size:
        done = s == 1
        if done.any():
            out[o[done]] += c[done]
        c, s, o = c[~done], s[~done], o[~done]
        if not c.size:
            break
        left = s // 2
        cl = rng.binomial(c, left / s)
        cr = c - cl
        c = np.concatenate([cl, cr])
        o = np.concatenate([o, o + left])
        s = np.concatenate([left, s - left])
        keep = c > 0
        c, s, o = c[keep], s[keep], o[keep]
    return out


class DomainMap:
    kind: str
    source_n: int
    target_n: int

    def transport(self, values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def transport_counts(self, counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def pushforward_mass(self, mass: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def pushforward(self, d: Pmf) -> Pmf:
        if d.n != self.source_n:
            raise ValueError("pmf domain does not match map source")
        return Pmf(self.pushforward_mass(d.mass), measure=d.measure)

    def to_dict(self) -> dict:
        raise NotImplementedError

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def then(self, other: "DomainMap") -> "ComposedMap":
        return ComposedMap([self, other])


class SplitMap(DomainMap):
    """Element ``i`` goes to a uniformly random one of ``a[i]`` sub-buckets.

    Covers both the split distribution of a multiset (``a[i]`` is one plus
    the multiplicity of ``i``) and high-sample flattening (``a[i]`` is the
    learned bucket size).
    """

    def __init__(self, a: Sequence[int], kind: str = "Split"):
        a = np.asarray(a, dtype=np.int64).reshape(-1)
        if a.size == 0 or a.min() < 1:
            raise ValueError("every bucket needs at least one sub-bucket")
        self.a = a
        self.kind = kind
        self.source_n = int(a.size)
        self.target_n = int(a.sum())
        self.offsets = np.concatenate(([0], np.cumsum(a)[:-1]))

    def transport(self, values, rng):
        values = np.asarray(values, dtype=np.int64)
        j = (rng.random(values.size) * self.a[values]).astype(np.int64)
        return self.offsets[values] + j

    def transport_counts(self, counts, rng):
        return uniform_split_counts(counts, self.a, rng)

    def pushforward_mass(self, mass):
        return np.repeat(np.asarray(mass, dtype=np.float64) / self.a, self.a)

    def parent(self) -> np.ndarray:
        """Source element of every target cell."""
        return np.repeat(np.arange(self.source_n), self.a)

    def to_dict(self):
        return {"kind": self.kind, "source_n": self.source_n, "target_n": self.target_n, "a": self.a.tolist()}


class UnifierMap(DomainMap):
    """Keep a sample with probability 1/2, else replace it by a uniform cell."""

    kind = "Unifier"

    def __init__(self, N: int, seed: int = 0):
        if N < 1:
            raise ValueError("N must be positive")
        self.source_n = self.target_n = int(N)
        self.seed = int(seed)

    def transport(self, values, rng):
        values = np.asarray(values, dtype=np.int64).copy()
        move = rng.random(values.size) < 0.5
        values[move] = rng.integers(0, self.target_n, size=int(move.sum()))
        return values

    def transport_counts(self, counts, rng):
        counts = np.asarray(counts, dtype=np.int64)
        kept = rng.binomial(counts, 0.5)
        moved = int((counts - kept).sum())
        return kept + multinomial(moved, np.ones(self.target_n), rng)

    def pushforward_mass(self, mass):
        mass = np.asarray(mass, dtype=np.float64)
        return mass / 2.0 + mass.sum() / (2.0 * self.target_n)

    def to_dict(self):
        return {"kind": self.kind, "source_n": self.source_n, "target_n": self.target_n, "seed": self.seed}


class IdentityMap(DomainMap):
    """Three-stage map sending a known ``D*`` on ``[n]`` to ``U_{6n}``.

    (i) mix with ``U_n``; (ii) keep element ``i`` with probability
    ``k_i / (6n D1*[i])`` where ``k_i = floor(6n D1*[i])``, else send it to an
    overflow bucket; (iii) split bucket ``i`` into ``k_i`` cells and the
    overflow bucket into ``6n - sum(k)`` cells.
    """

    kind = "Identity"

    def __init__(self, target: Pmf):
        if target.measure:
            raise ValueError("identity reduction needs a distribution")
        n = target.n
        d1 = 0.5 * target.mass + 0.5 / n
        scaled = 6.0 * n * d1
        k = np.floor(scaled + 1e-9).astype(np.int64)
        self.k = k
        self.keep = np.minimum(1.0, k / scaled)
        self.k_ovf = 6 * n - int(k.sum())
        if self.k_ovf < 0:
            raise ValueError("invalid target for the identity reduction")
        self.target = target
        self.source_n = n
        self.target_n = 6 * n
        self.offsets = np.concatenate(([0], np.cumsum(k)[:-1]))
        self.ovf_offset = int(k.sum())
        self._sizes = np.concatenate([k, [self.k_ovf]]) if self.k_ovf else k

    def _mix(self, values, rng):
        values = np.asarray(values, dtype=np.int64).copy()
        move = rng.random(values.size) < 0.5
        values[move] = rng.integers(0, self.source_n, size=int(move.sum()))
        return values

    def transport(self, values, rng):
        v = self._mix(values, rng)
        out = np.empty(v.size, dtype=np.int64)
        stay = rng.random(v.size) < self.keep[v]
        vs = v[stay]
        out[stay] = self.offsets[vs] + (rng.random(vs.size) * self.k[vs]).astype(np.int64)
        n_ovf = int((~stay).sum())
        if n_ovf:
            if self.k_ovf == 0:
                raise RuntimeError("overflow bucket hit with zero cells")
            out[~stay] = self.ovf_offset + rng.integers(0, self.k_ovf, size=n_ovf)
        return out

    def transport_counts(self, counts, rng):
        counts = np.asarray(counts, dtype=np.int64)
        kept = rng.binomial(counts, 0.5)
        moved = int((counts - kept).sum())
        c1 = kept + multinomial(moved, np.ones(self.source_n), rng)
        stay = rng.binomial(c1, self.keep)
        ovf = int((c1 - stay).sum())
        if ovf and self.k_ovf == 0:
            raise RuntimeError("overflow bucket hit with zero cells")
        if self.k_ovf:
            return uniform_split_counts(np.concatenate([stay, [ovf]]), self._sizes, rng)
        return uniform_split_counts(stay, self._sizes, rng)

    def pushforward_mass(self, mass):
        mass = np.asarray(mass, dtype=np.float64)
        d1 = 0.5 * mass + 0.5 * mass.sum() / self.source_n
        stay = d1 * self.keep
        ovf = float((d1 - stay).sum())
        cells = np.repeat(stay / self.k, self.k)
        if self.k_ovf:
            cells = np.concatenate([cells, np.full(self.k_ovf, ovf / self.k_ovf)])
        return cells

    def to_dict(self):
        return {
            "kind": self.kind,
            "source_n": self.source_n,
            "target_n": self.target_n,
            "target": self.target.to_dict(),
            "k": self.k.tolist(),
            "k_ovf": self.k_ovf,
        }


class ComposedMap(DomainMap):
    kind = "Composed"

    def __init__(self, maps: Sequence[DomainMap]):
        flat: list[DomainMap] = []
        for m in maps:
            flat.extend(m.maps if isinstance(m, ComposedMap) else [m])
        for a, b in zip(flat, flat[1:]):
            if a.target_n != b.source_n:
                raise ValueError("composed maps have mismatched domains")
        self.maps = flat
        self.source_n = flat[0].source_n
        self.target_n = flat[-1].target_n

    def transport(self, values, rng):
        for m in self.maps:
            values = m.transport(values, rng)
        return values

    def transport_counts(self, counts, rng):
        for m in self.maps:
            counts = m.transport_counts(counts, rng)
        return counts

    def pushforward_mass(self, mass):
        for m in self.maps:
            mass = m.pushforward_mass(mass)
        return mass

    def to_dict(self):
        return {"kind": self.kind, "maps": [m.to_dict() for m in self.maps]}


def map_from_dict(d: dict) -> DomainMap:
    kind = d["kind"]
    if kind in ("Split", "HighSample"):
        return SplitMap(d["a"], kind=kind)
    if kind == "Unifier":
        return UnifierMap(d["target_n"], d.get("seed", 0))
    if kind == "Identity":
        return IdentityMap(Pmf.from_dict(d["target"]))
    if kind == "Composed":
        return ComposedMap([map_from_dict(x) for x in d["maps"]])
    raise ValueError(f"unknown map kind {kind!r}")


def map_from_json(text: str) -> DomainMap:
    return map_from_dict(json.loads(text))


# --------------------------------------------------------------------------
# Constructors


def split_map(n: int, S) -> SplitMap:
    """Split map of the multiset ``S`` (values in ``[n]``, or a SampleSet)."""
    if isinstance(S, SampleSet):
        counts = S.counts()
    else:
        S = np.asarray(S, dtype=np.int64)
        if S.size and (S.min() < 0 or S.max() >= n):
            raise ValueError("multiset elements must lie in [n]")
        counts = np.bincount(S, minlength=n)
    return SplitMap(1 + np.asarray(counts, dtype=np.int64), kind="Split")


def mixture_flatten(
    session: Session,
    m: float,
    rng: np.random.Generator,
    K: float = K_FLATTEN,
    overflow: float = OVERFLOW_FACTOR,
) -> SplitMap:
    """Split map of ``Poi(K m)`` fresh samples.

    Raises :class:`EstimationFailure` without drawing when the Poisson count
    exceeds ``overflow * K * m``.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    k = int(rng.poisson(K * m))
    if k > overflow * max(K * m, 1.0):
        raise EstimationFailure("flattening sample count overflow")
    return split_map(session.n, session.draw(k))


def mixture_flatten_pair(
    s1: Session,
    s2: Session,
    m: float,
    rng: np.random.Generator,
    K: float = K_FLATTEN,
    overflow: float = OVERFLOW_FACTOR,
) -> SplitMap:
    """Flatten the average of two mixtures by drawing each sample from a random side."""
    if s1.n != s2.n:
        raise ValueError("sessions have different domains")
    k = int(rng.poisson(K * m))
    if k > overflow * max(K * m, 1.0):
        raise EstimationFailure("flattening sample count overflow")
    k1 = int(rng.binomial(k, 0.5))
    counts = s1.draw(k1).counts() + s2.draw(k - k1).counts()
    return SplitMap(1 + counts, kind="Split")


def adversarial_flatten(sample: SampleSet, rng: np.random.Generator) -> tuple[SplitMap, SampleSet]:
    """Route each sample to a flattening half or a test half with probability 1/2.

    Returns the split map of the flattening half and the test half pushed
    through that map.
    """
    flat, test = sample.split(0.5, rng)
    fmap = split_map(sample.n, flat)
    return fmap, test.transport(fmap, rng)


def high_sample_flatten(
    session: Session, delta: float, C_learn: float = 4.0, samples: Optional[int] = None
) -> SplitMap:
    """Learn ``r`` from ``C n ln(n) / delta^2`` samples and split bucket ``i`` into ``ceil(r~[i] n)`` cells."""
    if not 0.0 < delta < 0.5:
        raise ValueError("delta must lie in (0, 1/2)")
    n = session.n
    if samples is None:
        samples = math.ceil(C_learn * n * max(1.0, math.log(n)) / delta**2)
    return _learned_split(session.draw(samples).counts(), samples)


def high_sample_flatten_pair(
    s1: Session,
    s2: Session,
    delta: float,
    rng: np.random.Generator,
    C_learn: float = 4.0,
    samples: Optional[int] = None,
) -> SplitMap:
    """:func:`high_sample_flatten` for the average of two mixtures; each sample comes from a random side."""
    if not 0.0 < delta < 0.5:
        raise ValueError("delta must lie in (0, 1/2)")
    if s1.n != s2.n:
        raise ValueError("sessions have different domains")
    n = s1.n
    if samples is None:
        samples = math.ceil(C_learn * n * max(1.0, math.log(n)) / delta**2)
    k1 = int(rng.binomial(samples, 0.5))
    counts = s1.draw(k1).counts() + s2.draw(samples - k1).counts()
    return _learned_split(counts, samples)


def _learned_split(counts: np.ndarray, samples: int) -> SplitMap:
    n = counts.size
    r_tilde = counts / samples
    a = np.maximum(1, np.ceil(r_tilde * n - 1e-9)).astype(np.int64)
    return SplitMap(a, kind="HighSample")


def unify_map(N: int, seed: int = 0) -> UnifierMap:
    return UnifierMap(N, seed)


def identity_reduction(target: Pmf) -> IdentityMap:
    return IdentityMap(target)


# --------------------------------------------------------------------------
# Sessions seen through a map


class MappedSession(Session):
    """A session whose draws pass through ``dmap``; charges go to the inner session."""

    def __init__(self, inner: Session, dmap: DomainMap, rng: np.random.Generator):
        if dmap.source_n != inner.n:
            raise ValueError("map source does not match session domain")
        self.inner = inner
        self.dmap = dmap
        self.rng = rng
        self.n = dmap.target_n
        self.spec = inner.spec

    @property
    def samples_used(self) -> int:
        return self.inner.samples_used

    @property
    def queries_used(self) -> int:
        return self.inner.queries_used

    @property
    def _order_rng(self):
        return self.inner._order_rng

    def draw(self, k: int) -> SampleSet:
        return self.inner.draw(k).transport(self.dmap, self.rng)
