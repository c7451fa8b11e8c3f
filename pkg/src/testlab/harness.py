"""Monte-Carlo trial runner, parameter sweeps and trade-off fits.

A sweep runs every cell of an ``(n, m, eps, lambda)`` grid for a fixed
number of trials.  Each trial builds a fresh instance and fresh sessions
from a seed derived from ``(seed, cell, trial_index)``, so adding cells
never shifts the streams of others.  Aggregation is a deterministic fold
over trial records sorted by index.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .closeness import (
    closeness_qopt_query_ceiling,
    closeness_query_ceiling,
    reduce_unequal_mixtures,
    test_closeness,
    test_closeness_query_optimal,
)
from .config import TesterConfig
from .core import (
    AdversarialSpec,
    GroundTruth,
    MixtureSpec,
    Pmf,
    TrialRecord,
    Verdict,
    make_rng,
    open_session,
)
from .instances import build_instance, gen_closeness_hard, gen_paninski
from .uniformity import (
    adversarial_query_ceiling,
    mixknow_query_ceiling,
    qopt_query_ceiling,
    test_identity,
    test_uniformity,
    test_uniformity_adversarial,
    test_uniformity_mixture_knowledge,
    test_uniformity_query_optimal,
    uniformity_query_ceiling,
)

__all__ = [
    "CSV_COLUMNS",
    "CLOSENESS_FAMILIES",
    "Cell",
    "CellSummary",
    "ExperimentConfig",
    "SweepReport",
    "TESTERS",
    "fit_tradeoff_slope",
    "run_trial",
    "sweep",
    "trial_seed",
]

TESTERS = (
    "uniformity",
    "identity",
    "adversarial",
    "uniformity_qopt",
    "mixknow",
    "closeness",
    "closeness_qopt",
)
CLOSENESS_FAMILIES = ("SamePair", "PaninskiPair", "HeavyPair", "ClosenessHard")
CSV_COLUMNS = (
    "tester",
    "n",
    "m",
    "eps",
    "lambda",
    "ground_truth",
    "accept_rate",
    "ci_lo",
    "ci_hi",
    "mean_samples",
    "mean_queries",
    "max_queries",
)


# --------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class Cell:
    n: int
    m: Optional[int]
    eps: float
    lam: float

    def key(self) -> list:
        return [self.n, self.m, self.eps, self.lam]


@dataclass
class ExperimentConfig:
    """One experiment: a tester, an instance family and a parameter grid.

    ``instance`` holds the family name and its options (``noise``, ``X``,
    ``m`` for the hard families, ``adversary`` for the adversarial tester).
    ``lam2`` gives the second closeness side its own mixture parameter.
    """

    tester: str
    instance: dict = field(default_factory=lambda: {"family": "Uniform"})
    n: list = field(default_factory=list)
    m: list = field(default_factory=lambda: [None])
    eps: list = field(default_factory=lambda: [0.4])
    lam: list = field(default_factory=lambda: [0.5])
    lam2: Optional[float] = None
    trials: int = 100
    seed: int = 0
    jobs: int = 1
    backend: str = "counts"
    tester_config: dict = field(default_factory=dict)
    csv_path: Optional[str] = None
    json_path: Optional[str] = None
    timing: bool = False
    fail_exit: bool = True

    def __post_init__(self) -> None:
        if self.tester not in TESTERS:
            raise ValueError(f"unknown tester {self.tester!r}; expected one of {TESTERS}")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        if "family" not in self.instance:
            raise ValueError("instance needs a family")
        TesterConfig.from_dict({"eps": 0.5, **{k: v for k, v in self.tester_config.items() if k != "eps"}})

    def cells(self) -> list[Cell]:
        return [Cell(int(n), None if m is None else int(m), float(e), float(l))
                for n, m, e, l in itertools.product(self.n, self.m, self.eps, self.lam)]

    def tester_cfg(self, cell: Cell) -> TesterConfig:
        return TesterConfig.from_dict({**self.tester_config, "eps": cell.eps})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def trial_seed(seed: int, cell: Cell, index: int) -> int:
    """``seed`` xor a hash of ``(cell, index)``; stable across runs and platforms."""
    blob = json.dumps(cell.key() + [int(index)]).encode()
    h = int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little") & ((1 << 63) - 1)
    return int(seed) ^ h


def _sub_seed(seed: int, name: str) -> int:
    return int(make_rng(seed, name).integers(0, 1 << 62))


# --------------------------------------------------------------------------
# Instances


def _closeness_pair(family: str, cell: Cell, opts: dict, seed: int, lam2: float):
    n, eps, lam = cell.n, cell.eps, cell.lam
    rng = make_rng(seed, "instance-noise")

    def noise():
        return Pmf(rng.dirichlet(np.full(n, float(opts.get("alpha", 10.0)))))

    if family == "ClosenessHard":
        inst = gen_closeness_hard(n, int(opts.get("m", cell.m or n)), eps, lam, int(opts.get("X", 0)), seed)
        return inst.specs, inst.ground_truth
    if family == "SamePair":
        p = noise()
        return (MixtureSpec(lam, p, noise()), MixtureSpec(lam2, p, noise())), GroundTruth.YES
    if family == "PaninskiPair":
        a = gen_paninski(n, eps / 4.0)
        b = Pmf(a.mass[::-1].copy())
        return (MixtureSpec(lam, a, noise()), MixtureSpec(lam2, b, noise())), GroundTruth.NO
    if family == "HeavyPair":
        w = float(opts.get("weight", 0.9))
        mass = np.full(n, (1.0 - w) / (n - 1))
        mass[0] = w
        p = Pmf(mass)
        return (MixtureSpec(lam, p, p), MixtureSpec(lam2, p, p)), GroundTruth.YES
    raise ValueError(f"unknown closeness family {family!r}; expected one of {CLOSENESS_FAMILIES}")


def _identity_pair(family: str, cell: Cell, seed: int):
    """Target ``D`` and a mixture whose ``p`` equals ``D`` (Match) or is ``eps``-far (Far)."""
    n, eps, lam = cell.n, cell.eps, cell.lam
    rng = make_rng(seed, "identity-target")
    beta = min(1.0, 2.0 * eps + 0.1)
    D = Pmf(beta / n + (1.0 - beta) * rng.dirichlet(np.ones(n)))
    q = Pmf(rng.dirichlet(np.ones(n)))
    if family == "Match":
        return D, MixtureSpec(lam, D, q), GroundTruth.YES
    if family == "Far":
        p = Pmf(D.mass + gen_paninski(n, eps).mass - 1.0 / n)
        return D, MixtureSpec(lam, p, q), GroundTruth.NO
    raise ValueError("identity families are Match and Far")


# --------------------------------------------------------------------------
# Trials


def _ceiling(config: ExperimentConfig, cell: Cell, cfg: TesterConfig) -> float:
    n, eps, lam = cell.n, cell.eps, cell.lam
    m = cell.m if cell.m is not None else n
    t = config.tester
    if t in ("uniformity", "identity"):
        return uniformity_query_ceiling(n, m, eps, lam, cfg)
    if t == "adversarial":
        M = cell.m if cell.m is not None else math.ceil(cfg.C_adv * math.sqrt(n) / (eps**2 * lam))
        return adversarial_query_ceiling(n, M, eps, lam, cfg)
    if t == "uniformity_qopt":
        return qopt_query_ceiling(n, eps, lam, cfg)
    if t == "mixknow":
        return mixknow_query_ceiling(n, eps, lam, cfg)
    lam_eff = lam if config.lam2 is None else lam * config.lam2
    if t == "closeness":
        return closeness_query_ceiling(n, m, eps, lam_eff, cfg)
    return closeness_qopt_query_ceiling(n, eps, lam_eff, cfg)


def _run(config: ExperimentConfig, cell: Cell, seed: int) -> tuple[Verdict, GroundTruth, list]:
    cfg = config.tester_cfg(cell)
    opts = {k: v for k, v in config.instance.items() if k != "family"}
    family = config.instance["family"]
    n, eps, lam = cell.n, cell.eps, cell.lam
    m = cell.m if cell.m is not None else n
    rng = make_rng(seed, "tester")
    t = config.tester
    if t in ("closeness", "closeness_qopt"):
        lam2 = lam if config.lam2 is None else config.lam2
        (a, b), truth = _closeness_pair(family, cell, opts, seed, lam2)
        backend = config.backend
        if config.lam2 is not None and config.lam2 != lam:
            backend = "log"
        s1 = open_session(a, _sub_seed(seed, "side1"), backend)
        s2 = open_session(b, _sub_seed(seed, "side2"), backend)
        raw = [s1, s2]
        if config.lam2 is not None and config.lam2 != lam:
            s1, s2 = reduce_unequal_mixtures(s1, s2)
        if t == "closeness":
            v = test_closeness(s1, s2, n, eps, m, config=cfg, rng=rng)
        else:
            v = test_closeness_query_optimal(s1, s2, n, eps, config=cfg, rng=rng)
        return v, truth, raw
    if t == "identity":
        D, spec, truth = _identity_pair(family, cell, seed)
        s = open_session(spec, _sub_seed(seed, "side1"), config.backend)
        return test_identity(s, D, eps, m, config=cfg, rng=rng), truth, [s]
    inst = build_instance(
        family, n, eps, lam, m=opts.get("m", cell.m), X=int(opts.get("X", 0)), seed=seed,
        noise=opts.get("noise", "dirichlet"),
    )
    spec, truth = inst.spec, inst.ground_truth
    if t == "adversarial":
        spec = AdversarialSpec(lam, spec.target, opts.get("adversary", "honest"))
        s = open_session(spec, _sub_seed(seed, "side1"), "log")
        return test_uniformity_adversarial(s, n, eps, cell.m, config=cfg, rng=rng), truth, [s]
    s = open_session(spec, _sub_seed(seed, "side1"), config.backend)
    if t == "uniformity":
        v = test_uniformity(s, n, eps, m, config=cfg, rng=rng)
    elif t == "uniformity_qopt":
        v = test_uniformity_query_optimal(s, n, eps, config=cfg, rng=rng)
    else:
        v = test_uniformity_mixture_knowledge(spec.mixture.normalized(), s, n, eps, config=cfg, rng=rng)
    return v, truth, [s]


def run_trial(config: ExperimentConfig, cell: Cell, trial_index: int) -> TrialRecord:
    """One trial of ``cell``; deterministic in ``(config.seed, cell, trial_index)``.

    Unexpected errors are recorded as ``Fail`` with the message in ``extra``.
    Wall-clock time is recorded only when ``config.timing`` is set, so that
    replays compare equal.
    """
    seed = trial_seed(config.seed, cell, trial_index)
    t0 = time.perf_counter()
    extra: dict = {"seed": seed}
    try:
        verdict, truth, sessions = _run(config, cell, seed)
        samples = sum(s.samples_used for s in sessions)
        queries = sum(s.queries_used for s in sessions)
        ceiling = _ceiling(config, cell, config.tester_cfg(cell))
        extra["within_ceiling"] = bool(queries <= ceiling)
    except (ValueError, RuntimeError, MemoryError) as exc:
        verdict, truth, samples, queries = Verdict.FAIL, GroundTruth.YES, 0, 0
        extra["error"] = f"{type(exc).__name__}: {exc}"
    elapsed = time.perf_counter() - t0 if config.timing else 0.0
    return TrialRecord(verdict, truth, int(samples), int(queries), elapsed, extra)


def _trial_job(args) -> TrialRecord:
    return run_trial(*args)


# --------------------------------------------------------------------------
# Aggregation


@dataclass
class CellSummary:
    tester: str
    n: int
    m: Optional[int]
    eps: float
    lam: float
    ground_truth: str
    trials: int
    accept_rate: float
    ci_lo: float
    ci_hi: float
    correct_rate: float
    fail_rate: float
    mean_samples: float
    max_samples: int
    mean_queries: float
    max_queries: int
    ceiling: float
    recorded: int
    skipped: Optional[str] = None

    def row(self) -> dict:
        return {
            "tester": self.tester,
            "n": self.n,
            "m": "" if self.m is None else self.m,
            "eps": self.eps,
            "lambda": self.lam,
            "ground_truth": self.ground_truth,
            "accept_rate": self.accept_rate,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "mean_samples": self.mean_samples,
            "mean_queries": self.mean_queries,
            "max_queries": self.max_queries,
        }


def clopper_pearson(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="exact")
    return float(ci.low), float(ci.high)


def _summarize(config: ExperimentConfig, cell: Cell, records: Sequence[TrialRecord], ceiling: float) -> CellSummary:
    T = len(records)
    acc = sum(r.verdict is Verdict.ACCEPT for r in records)
    lo, hi = clopper_pearson(acc, T)
    ok = [r for r in records if "error" not in r.extra]
    samples = np.array([r.samples_used for r in ok] or [0], dtype=np.float64)
    queries = np.array([r.queries_used for r in ok] or [0], dtype=np.float64)
    truths = {r.ground_truth.value for r in ok}
    return CellSummary(
        tester=config.tester,
        n=cell.n,
        m=cell.m,
        eps=cell.eps,
        lam=cell.lam,
        ground_truth="/".join(sorted(truths)) or "",
        trials=T,
        accept_rate=acc / T,
        ci_lo=lo,
        ci_hi=hi,
        correct_rate=sum(r.correct for r in ok) / T,
        fail_rate=sum(r.verdict is Verdict.FAIL for r in records) / T,
        mean_samples=float(samples.mean()),
        max_samples=int(samples.max()),
        mean_queries=float(queries.mean()),
        max_queries=int(queries.max()),
        ceiling=ceiling,
        recorded=len(ok),
    )


def _skip_reason(config: ExperimentConfig, cell: Cell) -> Optional[str]:
    if cell.n < 2:
        return "n must be at least 2"
    if not 0.0 < cell.eps < 1.0:
        return "eps must lie in (0, 1)"
    if not 0.0 < cell.lam <= 1.0:
        return "lambda must lie in (0, 1]"
    if cell.m is not None and cell.m < 1:
        return "m must be positive"
    if config.tester in ("closeness", "uniformity", "identity") and cell.m is not None and cell.m > cell.n:
        return "m must not exceed n"
    return None


@dataclass
class SweepReport:
    config: ExperimentConfig
    cells: list
    records: dict = field(default_factory=dict)
    slope: Optional[tuple] = None

    def rows(self) -> list[dict]:
        return [c.row() for c in self.cells if c.skipped is None]

    def fail_dominated(self) -> bool:
        return any(c.skipped is None and c.fail_rate > 0.5 for c in self.cells)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            w.writeheader()
            for row in self.rows():
                w.writerow(row)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "cells": [dataclasses.asdict(c) for c in self.cells],
            "slope": None if self.slope is None else {"slope": self.slope[0], "stderr": self.slope[1]},
        }

    def write_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def sweep(config: ExperimentConfig) -> SweepReport:
    """Run every cell for ``config.trials`` trials and aggregate.

    Trials run in a process pool when ``config.jobs > 1``.  Writes the CSV
    and JSON outputs when their paths are set.
    """
    cells = config.cells()
    summaries: list[CellSummary] = []
    records: dict = {}
    jobs = []
    active = []
    for cell in cells:
        reason = _skip_reason(config, cell)
        if reason is not None:
            summaries.append(_skipped(config, cell, reason))
            continue
        active.append(cell)
        jobs.extend((config, cell, i) for i in range(config.trials))
    if config.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            out = list(pool.map(_trial_job, jobs, chunksize=max(1, len(jobs) // (4 * config.jobs))))
    else:
        out = [_trial_job(j) for j in jobs]
    for i, cell in enumerate(active):
        recs = out[i * config.trials : (i + 1) * config.trials]
        records[cell] = recs
        summaries.append(_summarize(config, cell, recs, _ceiling(config, cell, config.tester_cfg(cell))))
    order = {c: i for i, c in enumerate(cells)}
    summaries.sort(key=lambda c: order[Cell(c.n, c.m, c.eps, c.lam)])
    report = SweepReport(config, summaries, records)
    try:
        report.slope = fit_tradeoff_slope(report)
    except ValueError:
        report.slope = None
    if config.csv_path:
        report.write_csv(config.csv_path)
    if config.json_path:
        report.write_json(config.json_path)
    return report


def _skipped(config: ExperimentConfig, cell: Cell, reason: str) -> CellSummary:
    nan = float("nan")
    return CellSummary(config.tester, cell.n, cell.m, cell.eps, cell.lam, "", 0, nan, nan, nan, nan, nan,
                       nan, 0, nan, 0, nan, 0, skipped=reason)


# --------------------------------------------------------------------------
# Trade-off fit


def _points(report: Union[SweepReport, Iterable[Mapping]], x: str, y: str) -> list[tuple[dict, float, float]]:
    if isinstance(report, SweepReport):
        rows = []
        for c in report.cells:
            if c.skipped is not None or c.recorded < c.trials:
                continue
            d = dataclasses.asdict(c)
            d["lambda"] = d["lam"]
            rows.append(d)
    else:
        rows = [dict(r) for r in report]
    pts = []
    for r in rows:
        xv, yv = r.get(x, ""), r.get(y, "")
        if xv in ("", None) or yv in ("", None):
            continue
        pts.append((r, float(xv), float(yv)))
    return pts


def fit_tradeoff_slope(
    report: Union[SweepReport, Iterable[Mapping]], x: str = "m", y: str = "mean_queries"
) -> tuple[float, float]:
    """OLS slope of ``log y`` against ``log x`` and its standard error.

    Accepts a report or CSV-like rows.  Needs at least three distinct ``x``
    values with every other grid parameter fixed.
    """
    pts = _points(report, x, y)
    others = [k for k in ("tester", "n", "m", "eps", "lambda") if k != x]
    if len({tuple(str(r.get(k)) for k in others) for r, _, _ in pts}) > 1:
        raise ValueError("cells differ in parameters other than the fitted one")
    xs = np.array([p[1] for p in pts])
    ys = np.array([p[2] for p in pts])
    if np.unique(xs).size < 3:
        raise ValueError("need at least three cells with distinct x values")
    if (xs <= 0).any() or (ys <= 0).any():
        raise ValueError("log-log fit needs positive values")
    res = stats.linregress(np.log(xs), np.log(ys))
    return float(res.slope), float(res.stderr)
