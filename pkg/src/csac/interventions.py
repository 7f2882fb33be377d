"""Exploration interventions and diagnostic probes for learning without resets.

All of them plug into :func:`csac.agent.train_step` through one
:class:`Interventions` hook object built from an :class:`InterventionConfig`.
With every switch off the hook object behaves exactly like plain SAC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import approx
from .agent import (
    AgentState,
    Batch,
    Hooks,
    actor_objective,
    init_critic,
    policy_objective,
    reinit_networks,
)
from .approx import MlpParams, adam_init, adam_step, forward_cache, mlp_backward

PROBE_MODES = ("learned", "fixed", "reinit_every_step")
RESET_VARIANTS = ("none", "plain", "reset_alpha", "reset_entropy")


# -- running statistics --------------------------------------------------------------


@dataclass
class RunningMoments:
    """Streaming per-dimension mean and variance (pairwise batch merge)."""

    shape: tuple = ()
    count: float = 0.0
    mean: np.ndarray = None
    m2: np.ndarray = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.shape)
        if self.m2 is None:
            self.m2 = np.zeros(self.shape)

    def update(self, x: np.ndarray) -> "RunningMoments":
        x = np.asarray(x, dtype=np.float64).reshape((-1, *self.shape))
        n = x.shape[0]
        if n == 0:
            return self
        b_mean = x.mean(axis=0)
        b_m2 = ((x - b_mean) ** 2).sum(axis=0)
        total = self.count + n
        delta = b_mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + b_m2 + delta * delta * (self.count * n / total)
        self.count = total
        return self

    @property
    def var(self) -> np.ndarray:
        if self.count == 0:
            return np.ones(self.shape)
        return self.m2 / self.count

    def normalize(self, x: np.ndarray, eps: float = 1e-8, clip: Optional[float] = None) -> np.ndarray:
        y = (np.asarray(x, dtype=np.float64) - self.mean) / np.sqrt(self.var + eps)
        return y if clip is None else np.clip(y, -clip, clip)


# -- alpha-tilde toggle ---------------------------------------------------------------


@dataclass
class ToggleState:
    """Performance-period bookkeeping for the fixed-temperature toggle.

    ``prev_perf`` and ``curr_perf`` are the mean rewards of the two most recent
    complete periods. ``active`` means the fixed temperature is in use and
    temperature learning is paused.
    """

    alpha_fixed: float = 0.02
    lr_alpha: float = 1e-3
    period: int = 100
    acc: float = 0.0
    count: int = 0
    prev_perf: Optional[float] = None
    curr_perf: Optional[float] = None
    eta_q: float = 1.0
    active: bool = False
    periods: int = 0


def toggle_observe(toggle: ToggleState, r: float) -> ToggleState:
    toggle.acc += r
    toggle.count += 1
    if toggle.count == toggle.period:
        toggle.prev_perf = toggle.curr_perf
        toggle.curr_perf = toggle.acc / toggle.period
        toggle.acc = 0.0
        toggle.count = 0
        toggle.periods += 1
        toggle.active = toggle.prev_perf is not None and toggle.curr_perf <= toggle.prev_perf
    return toggle


def toggle_decide(toggle: ToggleState, learned_alpha: float) -> tuple[float, float]:
    """``(alpha_hat, lr_alpha_hat)`` for the current period."""
    if toggle.active:
        return toggle.alpha_fixed, 0.0
    return learned_alpha, toggle.lr_alpha


def q_spread(q_values: np.ndarray) -> float:
    p5, p95 = np.percentile(q_values, [5.0, 95.0])
    return float(p95 - p5)


def update_qscale(eta_q: float, q_values: np.ndarray) -> float:
    return 0.99 * eta_q + 0.01 * max(q_spread(q_values), 1.0)


def scaled_policy_objective(obs, agent: AgentState, toggle: ToggleState, noise, norm_penalty: float = 0.0,
                            update_scale: bool = True):
    """``E[min_j Q_j / eta_Q - alpha_hat log pi / |A|]``.

    ``eta_Q`` is first moved with this batch's min-Q values (``update_scale``).
    """
    alpha_hat, _ = toggle_decide(toggle, agent.alpha)

    def q_coef(qmin):
        if update_scale:
            toggle.eta_q = update_qscale(toggle.eta_q, qmin)
        return 1.0 / toggle.eta_q

    return actor_objective(agent.policy, agent.q1, agent.q2, obs, noise, agent.act_dim,
                           q_coef, alpha_hat / agent.act_dim, norm_penalty)


# -- action penalties -------------------------------------------------------------------


def action_penalty_reward(r: float, a, tau: float) -> float:
    a = np.asarray(a, dtype=np.float64)
    return r - tau * float(a @ a)


def action_penalty_policy(objective: float, actions: np.ndarray, lam: float):
    """``J - lam * mean ||a||`` and its gradient with respect to the actions."""
    actions = np.asarray(actions, dtype=np.float64)
    norms = np.sqrt((actions * actions).sum(axis=1))
    grad = -lam / len(actions) * np.divide(actions, norms[:, None], out=np.zeros_like(actions),
                                           where=norms[:, None] > 0)
    return objective - lam * float(norms.mean()), grad


# -- entropy-only objective ----------------------------------------------------------------


def signed_alpha(alpha: float, logp: np.ndarray, target_entropy: float) -> float:
    """``alpha * sign(mean(log pi + H))`` with ``sign(0) = +1``."""
    return alpha if float(np.mean(logp + target_entropy)) >= 0.0 else -alpha


def entropy_only_objective(obs, agent: AgentState, noise, target_entropy: Optional[float] = None):
    """``E[-alpha_s log pi]``: pushes the policy entropy toward ``target_entropy``."""
    te = agent.target_entropy if target_entropy is None else target_entropy
    return actor_objective(agent.policy, agent.q1, agent.q2, obs, noise, agent.act_dim,
                           0.0, lambda logp: signed_alpha(agent.alpha, logp, te))


# -- fixed behaviour distribution -------------------------------------------------------------


@dataclass
class FixedDistSampler:
    """Sampler of ``tanh(N(mu, sigma))`` actions that ignores the policy."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def __call__(self, rng: np.random.Generator, act_dim: int) -> np.ndarray:
        return np.tanh(rng.normal(self.mu, self.sigma, size=act_dim))


def fixed_dist_override(mu: float, sigma: float) -> FixedDistSampler:
    return FixedDistSampler(mu, sigma)


# -- Q-function probes ------------------------------------------------------------------------


class QProbe:
    """Critic provider: learned normally, frozen at init, or redrawn every step."""

    def __init__(self, mode: str, rng: np.random.Generator):
        if mode not in PROBE_MODES:
            raise ValueError(f"probe mode must be one of {PROBE_MODES}")
        self.mode = mode
        self.rng = rng

    @property
    def trains_critic(self) -> bool:
        return self.mode == "learned"

    def prepare(self, agent: AgentState) -> None:
        if self.mode == "reinit_every_step":
            agent.q1 = init_critic(agent.cfg, agent.obs_dim, agent.act_dim, self.rng)
            agent.q2 = init_critic(agent.cfg, agent.obs_dim, agent.act_dim, self.rng)
            agent.q1_targ, agent.q2_targ = agent.q1.copy(), agent.q2.copy()


def q_probe_mode(mode: str, rng: np.random.Generator) -> QProbe:
    return QProbe(mode, rng)


# -- periodic network resets --------------------------------------------------------------------


@dataclass
class NetworkResetState:
    variant: str = "plain"
    period: int = 10000
    alpha_frozen: bool = False
    resets: int = 0


def network_reset(agent: AgentState, state: NetworkResetState, rng: np.random.Generator) -> AgentState:
    """Re-initialize actor and critics; the replay buffer is left alone."""
    reinit_networks(agent, rng)
    if state.variant == "reset_alpha":
        agent.log_alpha = np.array([math.log(rng.uniform(0.01, 1.0))])
        state.alpha_frozen = True
    elif state.variant == "reset_entropy":
        agent.target_entropy = float(rng.uniform(-agent.act_dim, 0.675 * agent.act_dim))
    state.resets += 1
    return agent


# -- random network distillation ----------------------------------------------------------------


@dataclass
class RndState:
    predictor: MlpParams
    target: MlpParams
    opt: approx.AdamState
    obs_moments: RunningMoments
    int_moments: RunningMoments
    c_int: float = 1.0
    p_upd: float = 0.25
    lr: float = 3e-4
    obs_clip: Optional[float] = 5.0


def init_rnd(obs_dim: int, rng: np.random.Generator, c_int=1.0, p_upd=0.25, lr=3e-4,
             predictor_hidden=(256,) * 4, target_hidden=(256,) * 2, out_dim=256, obs_clip=5.0) -> RndState:
    pred = approx.init_mlp((obs_dim, *predictor_hidden, out_dim), rng)
    targ = approx.init_mlp((obs_dim, *target_hidden, out_dim), rng)
    return RndState(pred, targ, adam_init(pred), RunningMoments((obs_dim,)), RunningMoments(()),
                    c_int, p_upd, lr, obs_clip)


def _rnd_features(rnd: RndState, s):
    return rnd.obs_moments.normalize(s, clip=rnd.obs_clip)


def rnd_raw_intrinsic(rnd: RndState, s: np.ndarray) -> np.ndarray:
    """``0.5 * ||f_pred(s) - f_target(s)||^2`` on normalized observations."""
    x = _rnd_features(rnd, s)
    d = approx.mlp_forward(rnd.predictor, x) - approx.mlp_forward(rnd.target, x)
    return 0.5 * (d * d).sum(axis=-1)


def rnd_intrinsic(rnd: RndState, s: np.ndarray, update_moments: bool = True) -> np.ndarray:
    """Intrinsic rewards standardized by their running moments."""
    raw = rnd_raw_intrinsic(rnd, s)
    if update_moments:
        rnd.int_moments.update(raw)
    return rnd.int_moments.normalize(raw)


def rnd_masks(rng: np.random.Generator, n: int, p: float) -> np.ndarray:
    if not 0.0 <= p <= 1.0:
        raise ValueError("update proportion must lie in [0, 1]")
    return (rng.random(n) < p).astype(np.float64)


def rnd_loss(rnd: RndState, next_states: np.ndarray, masks: Optional[np.ndarray] = None,
             rng: Optional[np.random.Generator] = None):
    """Masked mean of ``||f_pred(s') - f_target(s')||^2 / |S|``; returns ``(loss, grad)``."""
    if masks is None:
        masks = rnd_masks(rng, len(next_states), rnd.p_upd)
    x = _rnd_features(rnd, next_states)
    out, cache = forward_cache(rnd.predictor, x)
    d = out - approx.mlp_forward(rnd.target, x)
    obs_dim = next_states.shape[1]
    per_sample = (d * d).sum(axis=1) / obs_dim
    denom = max(float(masks.sum()), 1.0)
    loss = float(masks @ per_sample) / denom
    grad, _ = mlp_backward(rnd.predictor, cache, (2.0 / obs_dim / denom) * masks[:, None] * d)
    return loss, grad


def rnd_update(rnd: RndState, next_states: np.ndarray, rng: np.random.Generator) -> float:
    loss, grad = rnd_loss(rnd, next_states, rng=rng)
    rnd.predictor, rnd.opt = adam_step(rnd.predictor, grad, rnd.opt, rnd.lr)
    return loss


# -- configuration and hooks ----------------------------------------------------------------------


@dataclass
class InterventionConfig:
    alpha_toggle: bool = False
    alpha_tilde: float = 0.02
    toggle_lr_alpha: float = 1e-3
    toggle_period: int = 100
    reward_penalty: float = 0.0
    policy_penalty: float = 0.0
    rnd: bool = False
    rnd_c_int: float = 1.0
    rnd_p_upd: float = 0.25
    rnd_lr: float = 3e-4
    rnd_predictor_hidden: tuple = (256, 256, 256, 256)
    rnd_target_hidden: tuple = (256, 256)
    rnd_out: int = 256
    entropy_only: bool = False
    entropy_only_target: Optional[float] = None
    fixed_mu: Optional[float] = None
    fixed_sigma: Optional[float] = None
    q_probe: str = "learned"
    policy_entropy: bool = True
    net_reset: str = "none"
    net_reset_period: int = 10000

    def __post_init__(self):
        if self.q_probe not in PROBE_MODES:
            raise ValueError(f"q_probe must be one of {PROBE_MODES}")
        if self.net_reset not in RESET_VARIANTS:
            raise ValueError(f"net_reset must be one of {RESET_VARIANTS}")
        if (self.fixed_mu is None) != (self.fixed_sigma is None):
            raise ValueError("fixed_mu and fixed_sigma must be given together")
        if self.fixed_sigma is not None and not self.fixed_sigma > 0:
            raise ValueError("fixed_sigma must be positive")
        if self.reward_penalty < 0 or self.policy_penalty < 0:
            raise ValueError("action penalties must be nonnegative")
        self.rnd_predictor_hidden = tuple(int(h) for h in self.rnd_predictor_hidden)
        self.rnd_target_hidden = tuple(int(h) for h in self.rnd_target_hidden)


@dataclass
class InterventionRngs:
    probe: np.random.Generator
    rnd_init: np.random.Generator
    rnd_mask: np.random.Generator
    net_reset: np.random.Generator


class Interventions(Hooks):
    """Hook object that applies whichever interventions the config switches on."""

    def __init__(self, cfg: InterventionConfig, agent: AgentState, rngs: InterventionRngs):
        self.cfg = cfg
        self.rngs = rngs
        self.toggle = (ToggleState(cfg.alpha_tilde, cfg.toggle_lr_alpha, cfg.toggle_period)
                       if cfg.alpha_toggle else None)
        self.sampler = (fixed_dist_override(cfg.fixed_mu, cfg.fixed_sigma)
                        if cfg.fixed_mu is not None else None)
        self.probe = QProbe(cfg.q_probe, rngs.probe)
        self.train_critic = self.probe.trains_critic
        self.rnd = None
        if cfg.rnd:
            self.rnd = init_rnd(agent.obs_dim, rngs.rnd_init, cfg.rnd_c_int, cfg.rnd_p_upd, cfg.rnd_lr,
                                cfg.rnd_predictor_hidden, cfg.rnd_target_hidden, cfg.rnd_out)
        self.reset_state = (NetworkResetState(cfg.net_reset, cfg.net_reset_period)
                            if cfg.net_reset != "none" else None)
        self.last_rnd_loss = float("nan")

    def behavior_action(self, agent, obs, rng):
        if self.sampler is None:
            return None
        return self.sampler(rng, agent.act_dim)

    def learning_reward(self, outcome, action):
        r = outcome.reward_modified
        if self.cfg.reward_penalty:
            r = action_penalty_reward(r, action, self.cfg.reward_penalty)
        return r

    def observe_reward(self, agent, r):
        if self.toggle is not None and agent.env_steps >= agent.cfg.warmup_steps:
            toggle_observe(self.toggle, r)

    def before_update(self, agent):
        self.probe.prepare(agent)

    def critic_bonus(self, agent, batch: Batch):
        if self.rnd is None:
            return None
        self.rnd.obs_moments.update(batch.next_obs)
        return self.rnd.c_int * rnd_intrinsic(self.rnd, batch.obs)

    def after_critic(self, agent, batch: Batch):
        if self.rnd is not None:
            self.last_rnd_loss = rnd_update(self.rnd, batch.next_obs, self.rngs.rnd_mask)

    def policy_objective(self, agent, obs, noise):
        cfg = self.cfg
        if cfg.entropy_only:
            return entropy_only_objective(obs, agent, noise, cfg.entropy_only_target)
        if self.toggle is not None:
            if not cfg.policy_entropy:
                raise ValueError("the toggle needs the entropy term")
            return scaled_policy_objective(obs, agent, self.toggle, noise, cfg.policy_penalty)
        if not cfg.policy_entropy or cfg.policy_penalty:
            ent = agent.alpha if cfg.policy_entropy else 0.0
            return actor_objective(agent.policy, agent.q1, agent.q2, obs, noise, agent.act_dim,
                                   1.0, ent, cfg.policy_penalty)
        return policy_objective(obs, agent, noise)

    def alpha_lr(self, agent):
        if self.reset_state is not None and self.reset_state.alpha_frozen:
            return 0.0
        if self.toggle is not None:
            return toggle_decide(self.toggle, agent.alpha)[1]
        return agent.cfg.lr_alpha

    def after_step(self, agent):
        rs = self.reset_state
        if rs is not None and agent.env_steps % rs.period == 0:
            network_reset(agent, rs, self.rngs.net_reset)


def build_hooks(cfg: InterventionConfig, agent: AgentState, rngs: InterventionRngs) -> Hooks:
    return Interventions(cfg, agent, rngs)

