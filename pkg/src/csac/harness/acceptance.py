"""Directional desk-scale reproductions, evaluated from cached runs.

Each criterion is a set of arms (config overrides on a shared base) run over
five seeds. Finished runs are reused when an identical config already exists
under the output directory, so re-evaluating is cheap. Every evaluated
criterion writes a report directory with the arm configs, a summary and metric
plots; for a failed criterion that report is the failure analysis.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from csac.checks import CHECKS, CheckResult
from csac.metrics import median_value

from .config import ExperimentConfig, parse_config, to_ini, with_overrides
from .run import RunArtifacts, completed_run
from .sweep import _run_cell

log = logging.getLogger(__name__)

SEEDS = (0, 1, 2, 3, 4)

# Desk-scale Reacher: narrower nets and looser success thresholds than the
# library defaults so that a 100k-step run sees enough reaches to compare arms.
REACHER_DESK = """
[experiment]
task = reacher
total_steps = 100000
[agent]
hidden = 64,64
batch_size = 128
[physics]
d_thresh = 0.05
v_thresh = 0.2
"""

PENDULUM_DESK = """
[experiment]
task = pendulum
total_steps = 100000
[agent]
hidden = 32,32
batch_size = 128
"""


@dataclass
class Arm:
    name: str
    overrides: dict
    run_name: Optional[str] = None  # share runs between criteria with identical arms


@dataclass
class Criterion:
    number: int
    name: str
    base: str
    arms: list
    verdict: Callable  # dict[arm name -> list[RunArtifacts]] -> (passed, detail, stats)
    seeds: tuple = SEEDS

    def config(self, arm: Arm) -> ExperimentConfig:
        cfg = parse_config(self.base)
        over = {"name": arm.run_name or f"c{self.number}-{arm.name}", **arm.overrides}
        return with_overrides(cfg, over)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str = ""
    report_dir: Optional[Path] = None
    stats: dict = field(default_factory=dict)

    def line(self) -> str:
        return CheckResult(self.number, self.name, self.passed, self.detail).line()


def _medians(runs: dict, key: Callable[[RunArtifacts], float]) -> dict[str, float]:
    return {arm: median_value([key(a) for a in arts]) for arm, arts in runs.items()}


def _avg(a: RunArtifacts) -> float:
    return a.average_performance


def _fmt(d: dict) -> str:
    return ", ".join(f"{k} {v:.4g}" for k, v in d.items())


def nonzero_fraction(a: RunArtifacts) -> float:
    """Fraction of reward windows with a nonzero average reward."""
    v = np.asarray(a["avg_reward"].values)
    return float(np.mean(v != 0.0)) if len(v) else 0.0


def early_state_variance(a: RunArtifacts) -> float:
    """Mean block state variance over the first fifth of the run."""
    s = a["state_variance"]
    steps, values = np.asarray(s.steps), np.asarray(s.values)
    keep = steps <= a.manifest["steps"] // 5
    return float(values[keep].mean()) if keep.any() else float("nan")


def verdict_resets(runs):
    perf = _medians(runs, _avg)
    var = _medians(runs, early_state_variance)
    ok = perf["resets"] > perf["no_resets"] and var["resets"] > var["no_resets"]
    detail = f"median reward {_fmt(perf)}; median early state variance {_fmt(var)}"
    return ok, detail, {"median_reward": perf, "median_early_state_variance": var}


def verdict_probe(runs):
    frac = _medians(runs, nonzero_fraction)
    perf = _medians(runs, _avg)
    ok = frac["reinit_q"] > frac["fixed_q"]
    return ok, f"median nonzero-window fraction {_fmt(frac)}", {
        "median_nonzero_fraction": frac, "median_reward": perf}


def verdict_fixed_dist(runs):
    perf = _medians(runs, _avg)
    ok = all(perf["mu_0"] > v for k, v in perf.items() if k != "mu_0")
    return ok, f"median reward {_fmt(perf)}", {"median_reward": perf}


def verdict_interventions(runs):
    perf = _medians(runs, _avg)
    ok = perf["alpha_toggle"] > perf["baseline"] and perf["ln_critic"] > perf["baseline"]
    return ok, f"median reward {_fmt(perf)}", {"median_reward": perf}


def verdict_rbar_step(runs):
    perf = _medians(runs, _avg)
    lo, hi = min(perf.values()), max(perf.values())
    ratio = hi / lo if lo > 0 else float("inf")
    return ratio < 2.0, f"median reward {_fmt(perf)}; max/min {ratio:.3g}", {
        "median_reward": perf, "ratio": ratio}


NO_RESETS = {"env.time_reset_period": "none"}

CRITERIA = {
    10: Criterion(10, "resets vs no resets", REACHER_DESK, [
        Arm("resets", {"env.time_reset_period": 50}),
        Arm("no_resets", NO_RESETS),
    ], verdict_resets),
    11: Criterion(11, "reinit vs fixed Q probe", REACHER_DESK, [
        Arm("reinit_q", {**NO_RESETS, "total_steps": 50000, "interventions.policy_entropy": False,
                         "interventions.q_probe": "reinit_every_step"}),
        Arm("fixed_q", {**NO_RESETS, "total_steps": 50000, "interventions.policy_entropy": False,
                        "interventions.q_probe": "fixed"}),
    ], verdict_probe),
    12: Criterion(12, "fixed action distribution", REACHER_DESK, [
        Arm(f"mu_{mu}", {**NO_RESETS, "interventions.fixed_mu": float(mu),
                         "interventions.fixed_sigma": 0.3})
        for mu in (-2, 0, 2)
    ], verdict_fixed_dist),
    13: Criterion(13, "interventions without resets", REACHER_DESK, [
        Arm("baseline", NO_RESETS, run_name="c10-no_resets"),
        Arm("alpha_toggle", {**NO_RESETS, "interventions.alpha_toggle": True,
                             "interventions.alpha_tilde": 0.02}),
        Arm("ln_critic", {**NO_RESETS, "agent.critic_norm": "layer_norm"}),
    ], verdict_interventions),
    14: Criterion(14, "average-reward step size", PENDULUM_DESK, [
        Arm(f"alpha_rbar_{s}", {"agent.alpha_rbar": s}) for s in ("3e-05", "0.0003", "0.003")
    ], verdict_rbar_step),
}

ORACLE_NUMBERS = {i + 1: name for i, name in enumerate(CHECKS)}


def run_criterion(crit: Criterion, out, workers: int = 1) -> dict[str, list[RunArtifacts]]:
    """Run (or reuse) every arm and seed of ``crit``."""
    out = Path(out)
    cfgs = {arm.name: crit.config(arm) for arm in crit.arms}
    jobs = [(cfg, s, out, True) for cfg in cfgs.values() for s in crit.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_cell, jobs))
    else:
        outcomes = [_run_cell(j) for j in jobs]
    failed = [(job[0].label, seed, err) for job, (seed, _, err) in zip(jobs, outcomes) if err]
    if failed:
        raise RuntimeError(f"criterion {crit.number}: runs failed: {failed}")
    return {name: [completed_run(cfg, s, out) for s in crit.seeds] for name, cfg in cfgs.items()}


def evaluate(crit: Criterion, out, workers: int = 1) -> CriterionResult:
    try:
        runs = run_criterion(crit, out, workers)
    except RuntimeError as err:
        return CriterionResult(crit.number, crit.name, False, str(err))
    passed, detail, stats = crit.verdict(runs)
    report = write_report(crit, runs, Path(out), passed, stats)
    return CriterionResult(crit.number, crit.name, passed, detail, report, stats)


def write_report(crit: Criterion, runs: dict, out: Path, passed: bool, stats: dict) -> Path:
    rdir = out / "reports" / f"c{crit.number}"
    rdir.mkdir(parents=True, exist_ok=True)
    for arm in crit.arms:
        (rdir / f"{arm.name}.ini").write_text(to_ini(crit.config(arm)))
    per_run = {arm: [{"seed": a.seed, "run_dir": str(a.run_dir),
                      "average_performance": a.average_performance,
                      "early_state_variance": early_state_variance(a),
                      "nonzero_fraction": nonzero_fraction(a)} for a in arts]
               for arm, arts in runs.items()}
    summary = {"criterion": crit.number, "name": crit.name, "passed": passed,
               "stats": stats, "runs": per_run}
    (rdir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    plot_runs(runs, rdir / "metrics.png", f"criterion {crit.number}: {crit.name}")
    return rdir


PLOTTED = ("avg_reward", "state_variance", "alpha", "entropy", "critic_loss", "rbar")


def plot_runs(runs: dict, path: Path, title: str) -> Optional[Path]:
    """One panel per metric, one colour per arm, one line per seed."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping %s", path)
        return None
    fig, axes = plt.subplots(2, 3, figsize=(15, 8))
    colours = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for ax, metric in zip(axes.flat, PLOTTED):
        for i, (arm, arts) in enumerate(runs.items()):
            for j, a in enumerate(arts):
                if metric in a.series:
                    s = a[metric]
                    ax.plot(s.steps, s.values, color=colours[i % len(colours)], alpha=0.6,
                            lw=1, label=arm if j == 0 else None)
        ax.set_title(metric)
        ax.set_xlabel("step")
    axes.flat[0].legend()
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def evaluate_all(out="runs/acceptance", only=None, workers: int = 1) -> list:
    """Results for criteria 1-14, or the numbers in ``only``."""
    numbers = sorted(only) if only else list(ORACLE_NUMBERS) + list(CRITERIA)
    results = []
    for n in numbers:
        if n in ORACLE_NUMBERS:
            results.append(CHECKS[ORACLE_NUMBERS[n]]())
        elif n in CRITERIA:
            results.append(evaluate(CRITERIA[n], out, workers))
        else:
            raise ValueError(f"no acceptance criterion {n}")
    return results
