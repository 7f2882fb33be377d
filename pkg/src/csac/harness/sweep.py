"""Grid sweeps over config keys and aggregation of finished runs."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from csac.metrics import RunSummary, aggregate_runs

from .config import ExperimentConfig, fingerprint, with_overrides
from .run import completed_run, run_experiment

log = logging.getLogger(__name__)


@dataclass
class CellResult:
    overrides: dict
    label: str
    config_hash: str
    runs: list = field(default_factory=list)
    failures: list = field(default_factory=list)  # (seed, message)

    def aggregate(self) -> Optional[tuple[RunSummary, RunSummary, RunSummary]]:
        return aggregate_runs(self.runs) if self.runs else None

    @property
    def median(self) -> float:
        agg = self.aggregate()
        return agg[1].average_performance if agg else float("nan")


def parse_grid(specs: Sequence[str]) -> dict[str, list[str]]:
    """``["gamma=0.9,0.99", "rnd.c_int=1,3"]`` -> ``{"gamma": [...], ...}``."""
    grid = {}
    for spec in specs:
        key, sep, values = spec.partition("=")
        if not sep or not key.strip() or not values.strip():
            raise ValueError(f"grid entries look like key=v1,v2,... (got {spec!r})")
        grid[key.strip()] = [v.strip() for v in values.split(",") if v.strip()]
    return grid


def grid_cells(cfg: ExperimentConfig, grid: dict) -> list[tuple[dict, ExperimentConfig]]:
    keys = list(grid)
    cells = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        cells.append((overrides, with_overrides(cfg, overrides)))
    return cells


def _run_cell(args) -> tuple[int, Optional[float], Optional[str]]:
    cfg, seed, out_dir, reuse = args
    try:
        art = completed_run(cfg, seed, out_dir) if reuse else None
        if art is None:
            art = run_experiment(cfg, seed, out_dir=out_dir)
        return seed, art.average_performance, None
    except Exception as err:  # a failed cell must not stop the sweep
        return seed, None, f"{type(err).__name__}: {err}"


def run_sweep(cfg: ExperimentConfig, grid: dict, seeds: Sequence[int], out_dir=None,
              reuse: bool = True, workers: int = 1) -> list[CellResult]:
    """Run every grid cell for every seed; failures are recorded, not raised.

    Cells are plain runs, so a cell's artifacts equal those of launching the same
    config individually. With ``reuse`` a finished identical run is read back
    instead of recomputed.
    """
    out_dir = Path(out_dir or cfg.out_dir)
    cells = grid_cells(cfg, grid)
    jobs = [(c, s, out_dir, reuse) for _, c in cells for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_cell, jobs))
    else:
        outcomes = [_run_cell(j) for j in jobs]

    results, it = [], iter(outcomes)
    for overrides, c in cells:
        cell = CellResult(overrides, c.label, fingerprint(c))
        for _ in seeds:
            seed, avg, err = next(it)
            if err is None:
                cell.runs.append(RunSummary(seed, cell.config_hash, avg, label=c.label))
            else:
                log.error("cell %s seed %d failed: %s", c.label, seed, err)
                cell.failures.append((seed, err))
        results.append(cell)
    write_sweep_tables(results, out_dir, list(grid))
    return results


def write_sweep_tables(results: list[CellResult], out_dir: Path, keys: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep_runs.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(keys + ["label", "seed", "average_performance", "status"])
        for cell in results:
            vals = [cell.overrides[k] for k in keys]
            for r in cell.runs:
                w.writerow(vals + [cell.label, r.seed, repr(r.average_performance), "ok"])
            for seed, msg in cell.failures:
                w.writerow(vals + [cell.label, seed, "", msg])
    with open(out_dir / "sweep_summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(keys + ["label", "runs", "failed", "min", "median", "max"])
        for cell in results:
            agg = cell.aggregate()
            stats = [repr(a.average_performance) for a in agg] if agg else ["", "", ""]
            w.writerow([cell.overrides[k] for k in keys]
                       + [cell.label, len(cell.runs), len(cell.failures)] + stats)


def summarize(root) -> list[dict]:
    """Min/median/max whole-period averages of every config found under ``root``."""
    groups: dict[str, list[RunSummary]] = {}
    for path in sorted(Path(root).rglob("manifest.json")):
        with open(path) as f:
            m = json.load(f)
        if not m.get("complete"):
            continue
        groups.setdefault(m["label"], []).append(
            RunSummary(m["seed"], m["fingerprint"], m["average_performance"], label=m["label"]))
    rows = []
    for label, runs in sorted(groups.items()):
        lo, med, hi = aggregate_runs(runs)
        rows.append({"label": label, "runs": len(runs),
                     "min": lo.average_performance, "min_seed": lo.seed,
                     "median": med.average_performance, "median_seed": med.seed,
                     "max": hi.average_performance, "max_seed": hi.seed})
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return "no completed runs found"
    head = f"{'config':<40} {'runs':>4} {'min':>12} {'median':>12} {'max':>12}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['label']:<40} {r['runs']:>4} {r['min']:>12.6g} {r['median']:>12.6g} {r['max']:>12.6g}")
    return "\n".join(lines)
