"""Post-hoc measurements over recorded reward and observation streams.

Incomplete trailing windows, blocks and episodes are dropped, so every
reported value is a statistic over a complete period.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass
class MetricSeries:
    name: str
    steps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.steps.shape != self.values.shape:
            raise ValueError("steps and values differ in length")
        if len(self.steps) > 1 and np.any(np.diff(self.steps) <= 0):
            raise ValueError("steps must be strictly increasing")

    def __len__(self):
        return len(self.steps)

    def pairs(self) -> list[tuple[int, float]]:
        return list(zip(self.steps.tolist(), self.values.tolist()))


@dataclass
class RunSummary:
    seed: int
    config_hash: str
    average_performance: float
    series: dict = field(default_factory=dict)
    label: str = ""


def window_average_reward(rewards: Sequence[float], window: int = 1000, name: str = "avg_reward") -> MetricSeries:
    """Mean reward of each complete window, indexed by the window's last step (1-based)."""
    r = np.asarray(rewards, dtype=np.float64)
    k = len(r) // window
    values = r[: k * window].reshape(k, window).mean(axis=1) if k else np.zeros(0)
    return MetricSeries(name, window * np.arange(1, k + 1), values)


def episode_returns(rewards: Sequence[float], reset_steps: Iterable[int]) -> MetricSeries:
    """Undiscounted sum of rewards between consecutive resets.

    ``reset_steps`` are 1-based step indices at which a reset fired; the reward
    of that step belongs to the episode it ends. Rewards after the last reset
    are dropped.
    """
    r = np.asarray(rewards, dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(r)])
    steps, values, prev = [], [], 0
    for s in reset_steps:
        s = int(s)
        if s < prev:
            raise ValueError("reset steps must be sorted")
        if s == prev:
            continue
        steps.append(s)
        values.append(csum[s] - csum[prev])
        prev = s
    return MetricSeries("returns", np.array(steps, dtype=np.int64), np.array(values))


def state_variance(observations: np.ndarray, block: int = 1000) -> MetricSeries:
    """Per-dimension sample variance (n - 1) inside each block, summed over dimensions."""
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim == 1:
        obs = obs[:, None]
    k = obs.shape[0] // block
    if k == 0:
        return MetricSeries("state_variance", np.zeros(0), np.zeros(0))
    blocks = obs[: k * block].reshape(k, block, obs.shape[1])
    values = blocks.var(axis=1, ddof=1).sum(axis=1)
    return MetricSeries("state_variance", block * np.arange(1, k + 1), values)


def whole_period_average(rewards: Sequence[float]) -> float:
    r = np.asarray(rewards, dtype=np.float64)
    return float(r.mean()) if len(r) else float("nan")


def aggregate_runs(runs: Sequence[RunSummary]) -> tuple[RunSummary, RunSummary, RunSummary]:
    """Minimum, median and maximum runs by whole-period average performance.

    The median of ``n`` runs is the ``ceil(n / 2)``-th in ascending order, so
    the 5th of 10. Ties are broken by seed to keep the choice order-independent.
    """
    if not runs:
        raise ValueError("need at least one run")
    ordered = sorted(runs, key=lambda r: (r.average_performance, r.seed, r.label))
    return ordered[0], ordered[math.ceil(len(ordered) / 2) - 1], ordered[-1]


def median_value(values: Sequence[float]) -> float:
    """The ``ceil(n / 2)``-th smallest value, matching :func:`aggregate_runs`."""
    v = sorted(values)
    return float(v[math.ceil(len(v) / 2) - 1])
