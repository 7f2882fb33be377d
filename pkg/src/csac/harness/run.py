"""Single seeded runs: the interaction loop, metric CSVs, checkpoints, manifests."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import pickle
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from csac.agent import (
    AgentState,
    NumericDivergence,
    ReplayBuffer,
    Streams,
    init_agent,
    train_step,
)
from csac.envs import ContinuingEnv, ResetEvent, make_env, physics_dict
from csac.interventions import InterventionRngs, Interventions
from csac.metrics import (
    MetricSeries,
    episode_returns,
    state_variance,
    whole_period_average,
    window_average_reward,
)

from .config import ExperimentConfig, fingerprint, semantic_dict, to_ini

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
DIAGNOSTICS = ("alpha", "rbar", "entropy", "critic_loss", "eta_q", "toggle_active", "rnd_loss")


def stream(seed: int, name: str) -> np.random.Generator:
    """Named child stream of a run's root seed; stable across Python versions."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@dataclass
class RunState:
    """Everything needed to continue a run bit-exactly from a checkpoint."""

    cfg: ExperimentConfig
    seed: int
    env: ContinuingEnv
    agent: AgentState
    buffer: ReplayBuffer
    hooks: Interventions
    streams: Streams
    obs: np.ndarray
    rewards: np.ndarray
    learning_rewards: np.ndarray
    visited: np.ndarray
    reset_steps: list = field(default_factory=list)
    reset_kinds: list = field(default_factory=list)
    diag_steps: list = field(default_factory=list)
    diag: dict = field(default_factory=lambda: {k: [] for k in DIAGNOSTICS})
    step: int = 0
    wall_seconds: float = 0.0


@dataclass
class RunArtifacts:
    run_dir: Path
    seed: int
    config_hash: str
    series: dict
    average_performance: float
    manifest: dict

    def __getitem__(self, name: str) -> MetricSeries:
        return self.series[name]


class RunDiverged(RuntimeError):
    def __init__(self, message: str, dump_path: Path):
        super().__init__(message)
        self.dump_path = dump_path


def run_dir_for(cfg: ExperimentConfig, seed: int, out_dir=None) -> Path:
    return Path(out_dir or cfg.out_dir) / cfg.label / f"seed{seed}"


def init_run(cfg: ExperimentConfig, seed: int) -> RunState:
    env = make_env(cfg.env, stream(seed, "env"))
    agent = init_agent(cfg.agent, env.obs_dim, env.act_dim, stream(seed, "init"))
    buffer = ReplayBuffer(env.obs_dim, env.act_dim, cfg.agent.buffer_size,
                          episodic=cfg.agent.mode == "episodic")
    rngs = InterventionRngs(stream(seed, "probe"), stream(seed, "rnd_init"),
                            stream(seed, "rnd_mask"), stream(seed, "net_reset"))
    hooks = Interventions(cfg.interventions, agent, rngs)
    n = cfg.total_steps
    return RunState(
        cfg=cfg, seed=seed, env=env, agent=agent, buffer=buffer, hooks=hooks,
        streams=Streams(stream(seed, "action"), stream(seed, "update")),
        obs=env.observation(),
        rewards=np.zeros(n), learning_rewards=np.zeros(n), visited=np.zeros((n, env.obs_dim)),
    )


def _record_diagnostics(rs: RunState, update) -> None:
    hooks = rs.hooks
    rs.diag_steps.append(rs.step)
    row = {
        "alpha": rs.agent.alpha,
        "rbar": rs.agent.rbar,
        "entropy": update.entropy if update else float("nan"),
        "critic_loss": update.critic_loss if update else float("nan"),
        "eta_q": hooks.toggle.eta_q if hooks.toggle else float("nan"),
        "toggle_active": float(hooks.toggle.active) if hooks.toggle else float("nan"),
        "rnd_loss": hooks.last_rnd_loss,
    }
    for k in DIAGNOSTICS:
        rs.diag[k].append(float(row[k]))


def advance(rs: RunState, until: int, on_step=None) -> None:
    """Run the loop up to ``until`` total steps (1-based step indices)."""
    cfg = rs.cfg
    t0 = time.perf_counter()
    try:
        while rs.step < until:
            i = rs.step
            rs.visited[i] = rs.obs
            rs.obs, rec = train_step(rs.agent, rs.env, rs.buffer, rs.obs, rs.streams, rs.hooks)
            rs.step += 1
            rs.rewards[i] = rec.outcome.reward_original
            rs.learning_rewards[i] = rec.learning_reward
            if rec.outcome.reset_event is not ResetEvent.NONE:
                rs.reset_steps.append(rs.step)
                rs.reset_kinds.append(rec.outcome.reset_event.value)
            if rs.step % cfg.diag_every == 0:
                _record_diagnostics(rs, rec.update)
            if on_step is not None:
                on_step(rs)
    finally:
        rs.wall_seconds += time.perf_counter() - t0


def compute_series(rs: RunState) -> dict[str, MetricSeries]:
    n, cfg = rs.step, rs.cfg
    out = {
        "avg_reward": window_average_reward(rs.rewards[:n], cfg.window, "avg_reward"),
        "avg_learning_reward": window_average_reward(rs.learning_rewards[:n], cfg.window,
                                                     "avg_learning_reward"),
        "state_variance": state_variance(rs.visited[:n], cfg.variance_block),
        "returns": episode_returns(rs.rewards[:n], rs.reset_steps),
    }
    skip = set()
    if rs.hooks.toggle is None:
        skip |= {"eta_q", "toggle_active"}
    if rs.hooks.rnd is None:
        skip.add("rnd_loss")
    for k in DIAGNOSTICS:
        if k not in skip:
            out[k] = MetricSeries(k, rs.diag_steps, rs.diag[k])
    return out


def series_csv(series: MetricSeries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "value"])
    for s, v in series.pairs():
        w.writerow([s, repr(v)])
    return buf.getvalue()


def read_series_csv(path) -> MetricSeries:
    with open(path) as f:
        rows = list(csv.reader(f))[1:]
    name = Path(path).stem
    return MetricSeries(name, [int(r[0]) for r in rows], [float(r[1]) for r in rows])


def _atomic_write(path: Path, data, mode="w") -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, mode) as f:
        f.write(data)
    os.replace(tmp, path)


def save_checkpoint(rs: RunState, run_dir: Path) -> Path:
    path = run_dir / "checkpoint.pkl"
    blob = pickle.dumps({"format": CHECKPOINT_FORMAT, "fingerprint": fingerprint(rs.cfg), "state": rs},
                        protocol=pickle.HIGHEST_PROTOCOL)
    _atomic_write(path, blob, "wb")
    return path


def load_checkpoint(path) -> RunState:
    with open(path, "rb") as f:
        blob = pickle.load(f)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {blob.get('format')!r}")
    return blob["state"]


def write_outputs(rs: RunState, run_dir: Path, complete: bool) -> RunArtifacts:
    series = compute_series(rs)
    for name, s in series.items():
        _atomic_write(run_dir / f"{name}.csv", series_csv(s))
    avg = whole_period_average(rs.rewards[: rs.step])
    manifest = {
        "label": rs.cfg.label,
        "fingerprint": fingerprint(rs.cfg),
        "seed": rs.seed,
        "steps": rs.step,
        "complete": complete,
        "average_performance": avg,
        "average_learning_reward": whole_period_average(rs.learning_rewards[: rs.step]),
        "series": {name: f"{name}.csv" for name in series},
        "physics": physics_dict(rs.cfg.env),
        "config": semantic_dict(rs.cfg),
        "resets": {kind: rs.reset_kinds.count(kind) for kind in sorted(set(rs.reset_kinds))},
        "clipped_actions": rs.env.clip_count,
        "wall_seconds": rs.wall_seconds,
    }
    _atomic_write(run_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return RunArtifacts(run_dir, rs.seed, manifest["fingerprint"], series, avg, manifest)


def _dump_divergence(rs: RunState, err: NumericDivergence, run_dir: Path) -> Path:
    path = run_dir / "divergence.json"
    dump = {"message": str(err), "seed": rs.seed, "step": rs.step,
            "fingerprint": fingerprint(rs.cfg), **err.dump}
    _atomic_write(path, json.dumps(dump, indent=2, default=float) + "\n")
    return path


def _attach_log(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "run.log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def run_experiment(cfg: ExperimentConfig, seed: int, out_dir=None, resume: bool = False,
                   progress_every: int = 10_000) -> RunArtifacts:
    """Run ``cfg`` with ``seed`` to ``cfg.total_steps`` and write its artifacts.

    With ``resume`` an existing checkpoint of the same config continues from
    where it stopped; the result is bit-identical to an uninterrupted run.
    Non-finite values abort the run with ``RunDiverged`` after a diagnostic
    dump is written next to the metrics.
    """
    run_dir = run_dir_for(cfg, seed, out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = _attach_log(run_dir)
    try:
        rs = None
        ckpt = run_dir / "checkpoint.pkl"
        if resume and ckpt.exists():
            rs = load_checkpoint(ckpt)
            if fingerprint(rs.cfg) != fingerprint(cfg) or rs.seed != seed:
                raise ValueError(f"checkpoint at {ckpt} belongs to a different config or seed")
            rs.cfg = cfg
            log.info("resuming %s seed %d at step %d", cfg.label, seed, rs.step)
        if rs is None:
            rs = init_run(cfg, seed)
            _atomic_write(run_dir / "config.ini", to_ini(cfg))
            log.info("starting %s seed %d for %d steps", cfg.label, seed, cfg.total_steps)

        def on_step(state: RunState):
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(state, run_dir)
            if progress_every and state.step % progress_every == 0:
                log.info("step %d avg reward %.4f alpha %.4g rbar %.4g", state.step,
                         state.rewards[state.step - progress_every: state.step].mean(),
                         state.agent.alpha, state.agent.rbar)

        try:
            advance(rs, cfg.total_steps, on_step)
        except NumericDivergence as err:
            path = _dump_divergence(rs, err, run_dir)
            write_outputs(rs, run_dir, complete=False)
            log.error("numeric divergence: %s (dump at %s)", err, path)
            raise RunDiverged(str(err), path) from err
        save_checkpoint(rs, run_dir)
        art = write_outputs(rs, run_dir, complete=True)
        log.info("finished: whole-period average reward %.6g", art.average_performance)
        return art
    finally:
        log.removeHandler(handler)
        handler.close()


def load_artifacts(run_dir) -> RunArtifacts:
    """Read a finished run back from disk."""
    run_dir = Path(run_dir)
    with open(run_dir / "manifest.json") as f:
        manifest = json.load(f)
    series = {name: read_series_csv(run_dir / fname) for name, fname in manifest["series"].items()}
    return RunArtifacts(run_dir, manifest["seed"], manifest["fingerprint"], series,
                        manifest["average_performance"], manifest)


def completed_run(cfg: ExperimentConfig, seed: int, out_dir=None) -> Optional[RunArtifacts]:
    """Artifacts of an already finished identical run, if any."""
    run_dir = run_dir_for(cfg, seed, out_dir)
    try:
        art = load_artifacts(run_dir)
    except (OSError, ValueError, KeyError):
        return None
    m = art.manifest
    if m.get("complete") and m.get("fingerprint") == fingerprint(cfg) and m.get("steps") == cfg.total_steps:
        return art
    return None
