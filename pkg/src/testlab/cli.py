"""Command-line interface.

Every run command builds a one-cell :class:`ExperimentConfig` (optionally
starting from ``--config file.json``) and prints JSON: the per-trial
records plus the cell summary.  ``sweep`` runs a full grid from a config
file and ``fit`` reads a sweep CSV back.

Exit status is 0 on completion and 2 when some cell is Fail-dominated
(more than half of its trials ended in ``Fail``), unless the config sets
``fail_exit`` to false or ``--no-fail-exit`` is given.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import sys
from typing import Any, Optional

import click

from .harness import CSV_COLUMNS, Cell, ExperimentConfig, SweepReport, fit_tradeoff_slope, sweep
from .instances import FAMILIES, build_instance

FAIL_EXIT = 2

_UNIFORMITY_MODES = {
    "dist": "uniformity",
    "adv": "adversarial",
    "qopt": "uniformity_qopt",
    "mixknow": "mixknow",
}
_CLOSENESS_MODES = {"sublinear": "closeness", "qopt": "closeness_qopt"}


def _emit(payload: Any, out: Optional[str]) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, default=str)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        click.echo(text)


def _base(config_path: Optional[str], tester: str) -> dict:
    if config_path is None:
        return {"tester": tester}
    with open(config_path) as fh:
        d = json.load(fh)
    d["tester"] = tester
    return d


def _run_cell(base: dict, overrides: dict, instance: dict, out: Optional[str], fail_exit: Optional[bool]) -> None:
    d = dict(base)
    d.update({k: v for k, v in overrides.items() if v is not None})
    inst = dict(d.get("instance") or {})
    inst.update({k: v for k, v in instance.items() if v is not None})
    d["instance"] = inst
    if fail_exit is not None:
        d["fail_exit"] = fail_exit
    try:
        cfg = ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(str(exc)) from exc
    report = sweep(cfg)
    cells = []
    for c in report.cells:
        recs = report.records.get(_cell_key(c), [])
        cells.append({"summary": dataclasses.asdict(c), "records": [r.to_dict() for r in recs]})
    _emit({"config": cfg.to_dict(), "cells": cells}, out)
    _exit(report)


def _cell_key(summary) -> Cell:
    return Cell(summary.n, summary.m, summary.eps, summary.lam)


def _exit(report: SweepReport) -> None:
    if report.config.fail_exit and report.fail_dominated():
        sys.exit(FAIL_EXIT)


def _listify(v):
    return None if v is None else [v]


_common = [
    click.option("--n", type=int, default=None, help="Domain size."),
    click.option("--eps", type=float, default=None, help="Distance parameter."),
    click.option("--m", type=int, default=None, help="Sample budget (default n)."),
    click.option("--seed", type=int, default=None, help="Experiment seed."),
    click.option("--trials", type=int, default=None, help="Trials per cell."),
    click.option("--jobs", type=int, default=None, help="Worker processes."),
    click.option("--backend", type=click.Choice(["counts", "log"]), default=None),
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                 help="ExperimentConfig JSON to start from."),
    click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write JSON here instead of stdout."),
    click.option("--fail-exit/--no-fail-exit", default=None, help="Exit with status 2 on Fail-dominated cells."),
]


def common_options(f):
    for opt in reversed(_common):
        f = opt(f)
    return f


@click.group()
@click.version_option(package_name="artifact")
def main() -> None:
    """Testers for contaminated distributions with verification queries."""


@main.command()
@click.option("--family", type=click.Choice(FAMILIES), required=True)
@click.option("--n", type=int, required=True)
@click.option("--m", type=int, default=None, help="Sample scale of the hard families.")
@click.option("--eps", type=float, default=0.0)
@click.option("--lambda", "lam", type=float, default=1.0)
@click.option("--X", "X", type=click.IntRange(0, 1), default=0)
@click.option("--noise", type=click.Choice(["dirichlet", "uniform", "point"]), default="dirichlet")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def gen(family, n, m, eps, lam, X, noise, seed, out):
    """Generate an instance and print its MixtureSpec JSON with metadata."""
    try:
        inst = build_instance(family, n, eps, lam, m=m, X=X, seed=seed, noise=noise)
    except (ValueError, RuntimeError) as exc:
        raise click.ClickException(str(exc)) from exc
    _emit(inst.to_dict(), out)


@main.command()
@common_options
@click.option("--lambda", "lam", type=float, default=None, help="Mixture parameter.")
@click.option("--mode", type=click.Choice(sorted(_UNIFORMITY_MODES)), default="dist")
@click.option("--adversary", default=None, help="Adversary name for --mode adv.")
@click.option("--family", default=None, help="Instance family (default Uniform).")
@click.option("--noise", type=click.Choice(["dirichlet", "uniform", "point"]), default=None)
def uniformity(n, eps, m, seed, trials, jobs, backend, config_path, out, fail_exit, lam, mode, adversary, family, noise):
    """Run a uniformity tester on one instance."""
    base = _base(config_path, _UNIFORMITY_MODES[mode])
    over = dict(n=_listify(n), eps=_listify(eps), m=_listify(m), lam=_listify(lam),
                seed=seed, trials=trials, jobs=jobs, backend=backend)
    inst = {"family": family, "adversary": adversary, "noise": noise}
    if "family" not in (base.get("instance") or {}) and family is None:
        inst["family"] = "Uniform"
    _run_cell(base, over, inst, out, fail_exit)


@main.command()
@common_options
@click.option("--lambda", "lam", type=float, default=None, help="Mixture parameter.")
@click.option("--family", type=click.Choice(["Match", "Far"]), default=None)
def identity(n, eps, m, seed, trials, jobs, backend, config_path, out, fail_exit, lam, family):
    """Run the identity tester against a random explicit target."""
    base = _base(config_path, "identity")
    over = dict(n=_listify(n), eps=_listify(eps), m=_listify(m), lam=_listify(lam),
                seed=seed, trials=trials, jobs=jobs, backend=backend)
    inst = {"family": family}
    if "family" not in (base.get("instance") or {}) and family is None:
        inst["family"] = "Match"
    _run_cell(base, over, inst, out, fail_exit)


@main.command()
@common_options
@click.option("--lambda1", type=float, default=None, help="Mixture parameter of side 1.")
@click.option("--lambda2", type=float, default=None, help="Mixture parameter of side 2 (default lambda1).")
@click.option("--mode", type=click.Choice(sorted(_CLOSENESS_MODES)), default="sublinear")
@click.option("--family", default=None, help="SamePair, PaninskiPair, HeavyPair or ClosenessHard.")
def closeness(n, eps, m, seed, trials, jobs, backend, config_path, out, fail_exit, lambda1, lambda2, mode, family):
    """Run a closeness tester on a pair of instances."""
    base = _base(config_path, _CLOSENESS_MODES[mode])
    over = dict(n=_listify(n), eps=_listify(eps), m=_listify(m), lam=_listify(lambda1),
                lam2=lambda2, seed=seed, trials=trials, jobs=jobs, backend=backend)
    inst = {"family": family}
    if "family" not in (base.get("instance") or {}) and family is None:
        inst["family"] = "SamePair"
    _run_cell(base, over, inst, out, fail_exit)


@main.command("sweep")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--jobs", type=int, default=None)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None)
@click.option("--json", "json_path", type=click.Path(dir_okay=False), default=None)
@click.option("--fail-exit/--no-fail-exit", default=None)
def sweep_cmd(config_path, jobs, csv_path, json_path, fail_exit):
    """Run a parameter sweep; print one CSV row per cell and the fitted slope."""
    with open(config_path) as fh:
        d = json.load(fh)
    for key, val in (("jobs", jobs), ("csv_path", csv_path), ("json_path", json_path), ("fail_exit", fail_exit)):
        if val is not None:
            d[key] = val
    try:
        cfg = ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(str(exc)) from exc
    report = sweep(cfg)
    w = csv.DictWriter(sys.stdout, fieldnames=CSV_COLUMNS)
    w.writeheader()
    for row in report.rows():
        w.writerow(row)
    for c in report.cells:
        if c.skipped is not None:
            click.echo(f"# skipped n={c.n} m={c.m} eps={c.eps} lambda={c.lam}: {c.skipped}", err=True)
    if report.slope is not None:
        click.echo(f"# slope {report.slope[0]:.4f} +/- {report.slope[1]:.4f}", err=True)
    _exit(report)


@main.command()
@click.argument("csv_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--x", "x", default="m", show_default=True)
@click.option("--y", "y", default="mean_queries", show_default=True)
def fit(csv_file, x, y):
    """Fit the log-log slope of a sweep CSV."""
    with open(csv_file, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        slope, stderr = fit_tradeoff_slope(rows, x=x, y=y)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(json.dumps({"x": x, "y": y, "slope": slope, "stderr": stderr}))


if __name__ == "__main__":
    main()
