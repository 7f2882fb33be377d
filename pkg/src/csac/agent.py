"""Episodic and continuing soft actor-critic.

The continuing variant subtracts an exponential moving average of the reward
from the TD target and keeps no terminal flags: a state-based reset turns into
an ordinary transition into the post-reset state, carrying the reset penalty.

Every gradient in one update is computed from the parameters at the start of
the step, then all parameter groups are moved together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import approx
from .approx import AdamState, MlpParams, adam_init, adam_step, adam_update, forward_cache, mlp_backward
from .envs import ContinuingEnv, ResetEvent, StepOutcome

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
EPS_TANH = 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
MODES = ("continuing", "episodic")


class NumericDivergence(RuntimeError):
    """A loss or parameter went non-finite during training."""

    def __init__(self, message: str, dump: Optional[dict] = None):
        super().__init__(message)
        self.dump = dump or {}


class EmptyBuffer(LookupError):
    pass


class ContractViolation(RuntimeError):
    pass


# -- replay ----------------------------------------------------------------------


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: Optional[bool] = None


@dataclass
class Batch:
    obs: np.ndarray
    act: np.ndarray
    rew: np.ndarray
    next_obs: np.ndarray
    terminal: Optional[np.ndarray] = None

    def __len__(self):
        return self.obs.shape[0]


class ReplayBuffer:
    """Fixed-capacity ring buffer. Terminal flags exist only in episodic mode."""

    def __init__(self, obs_dim: int, act_dim: int, capacity: int = 10**6, episodic: bool = False):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.act = np.zeros((self.capacity, act_dim))
        self.rew = np.zeros(self.capacity)
        self.next_obs = np.zeros((self.capacity, obs_dim))
        self.terminal = np.zeros(self.capacity, dtype=bool) if episodic else None
        self.cursor = 0
        self.size = 0

    @property
    def episodic(self) -> bool:
        return self.terminal is not None

    def __len__(self):
        return self.size

    def add(self, tr: Transition) -> int:
        if self.episodic:
            if tr.terminal is None:
                raise ContractViolation("episodic buffer needs a terminal flag")
        elif tr.terminal is not None:
            raise ContractViolation("continuing transitions carry no terminal flag")
        i = self.cursor
        self.obs[i] = tr.state
        self.act[i] = tr.action
        self.rew[i] = tr.reward
        self.next_obs[i] = tr.next_state
        if self.episodic:
            self.terminal[i] = tr.terminal
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    # pickles hold only the filled rows so checkpoints stay small
    def __getstate__(self):
        state = dict(self.__dict__)
        for k in ("obs", "act", "rew", "next_obs", "terminal"):
            if state[k] is not None:
                state[k] = state[k][: self.size].copy()
        return state

    def __setstate__(self, state):
        for k in ("obs", "act", "rew", "next_obs", "terminal"):
            rows = state[k]
            if rows is not None:
                full = np.zeros((state["capacity"],) + rows.shape[1:], dtype=rows.dtype)
                full[: len(rows)] = rows
                state[k] = full
        self.__dict__.update(state)

    def get(self, i: int) -> Transition:
        if not 0 <= i < self.size:
            raise IndexError(i)
        term = bool(self.terminal[i]) if self.episodic else None
        return Transition(self.obs[i].copy(), self.act[i].copy(), float(self.rew[i]),
                          self.next_obs[i].copy(), term)

    def oldest_index(self) -> int:
        return self.cursor if self.size == self.capacity else 0

    def sample_indices(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.size == 0:
            raise EmptyBuffer("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=n)

    def batch(self, idx: np.ndarray) -> Batch:
        return Batch(self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx],
                     None if self.terminal is None else self.terminal[idx])

    def sample(self, rng: np.random.Generator, n: int) -> Batch:
        return self.batch(self.sample_indices(rng, n))


def rewrite_reset_transition(s_prev, a_prev, r_with_penalty, s_post_reset, mode="continuing") -> Transition:
    """Bridge a state-based reset: the failing step leads straight to the reset state."""
    if mode != "continuing":
        raise ContractViolation("reset transitions are only rewritten in continuing mode")
    return Transition(np.asarray(s_prev), np.asarray(a_prev), float(r_with_penalty), np.asarray(s_post_reset))


def make_transition(obs, action, outcome: StepOutcome, reward: float, mode: str) -> Transition:
    if mode == "continuing":
        if outcome.reset_event is ResetEvent.STATE_BASED:
            return rewrite_reset_transition(obs, action, reward, outcome.post_reset_observation)
        return Transition(obs, action, reward, outcome.observation_after)
    # episodic: a state-based reset terminates; a time-based one truncates and bootstraps.
    terminal = outcome.reset_event is ResetEvent.STATE_BASED
    return Transition(obs, action, reward, outcome.next_observation, terminal)


# -- squashed Gaussian policy -----------------------------------------------------


def policy_head(out: np.ndarray, act_dim: int):
    """Split raw policy output into mean and clamped log-std."""
    return out[..., :act_dim], np.clip(out[..., act_dim:], LOG_STD_MIN, LOG_STD_MAX)


def squash_sample(mu, log_std, noise):
    """``a = tanh(mu + sigma * noise)`` and its log-density. Returns ``(a, logp, x)``."""
    x = mu + np.exp(log_std) * noise
    a = np.tanh(x)
    logp = (-0.5 * noise * noise - log_std - HALF_LOG_2PI - np.log(1.0 - a * a + EPS_TANH)).sum(axis=-1)
    return a, logp, x


def sample_action(mu, log_std, rng: np.random.Generator):
    a, logp, _ = squash_sample(mu, log_std, rng.standard_normal(np.shape(mu)))
    return a, logp


def squashed_log_prob(a, mu, log_std):
    """Log-density of an action already in (-1, 1)."""
    a = np.asarray(a, dtype=np.float64)
    x = np.arctanh(a)
    z = (x - mu) / np.exp(log_std)
    return (-0.5 * z * z - log_std - HALF_LOG_2PI - np.log(1.0 - a * a + EPS_TANH)).sum(axis=-1)


# -- agent state -----------------------------------------------------------------


@dataclass
class AgentConfig:
    mode: str = "continuing"
    gamma: float = 0.99
    tau: float = 0.005
    lr_actor: float = 3e-4
    lr_critic: float = 1e-4
    lr_alpha: float = 1e-4
    alpha_rbar: float = 3e-4
    batch_size: int = 256
    buffer_size: int = 10**6
    hidden: tuple[int, ...] = (256, 256)
    warmup_steps: int = 1000
    init_alpha: float = 1.0
    target_entropy: Optional[float] = None
    actor_norm: str = "none"
    critic_norm: str = "none"
    ln_eps: float = 1e-5
    ln_affine: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class AgentState:
    cfg: AgentConfig
    obs_dim: int
    act_dim: int
    policy: MlpParams
    q1: MlpParams
    q2: MlpParams
    q1_targ: MlpParams
    q2_targ: MlpParams
    log_alpha: np.ndarray
    rbar: float
    target_entropy: float
    opt_policy: AdamState
    opt_q1: AdamState
    opt_q2: AdamState
    opt_alpha: AdamState
    env_steps: int = 0
    updates: int = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))


def init_policy(cfg: AgentConfig, obs_dim, act_dim, rng) -> MlpParams:
    return approx.init_mlp((obs_dim, *cfg.hidden, 2 * act_dim), rng, cfg.actor_norm, cfg.ln_eps, cfg.ln_affine)


def init_critic(cfg: AgentConfig, obs_dim, act_dim, rng) -> MlpParams:
    return approx.init_mlp((obs_dim + act_dim, *cfg.hidden, 1), rng, cfg.critic_norm, cfg.ln_eps, cfg.ln_affine)


def init_agent(cfg: AgentConfig, obs_dim: int, act_dim: int, rng: np.random.Generator) -> AgentState:
    policy = init_policy(cfg, obs_dim, act_dim, rng)
    q1 = init_critic(cfg, obs_dim, act_dim, rng)
    q2 = init_critic(cfg, obs_dim, act_dim, rng)
    log_alpha = np.array([math.log(cfg.init_alpha)])
    te = -float(act_dim) if cfg.target_entropy is None else float(cfg.target_entropy)
    return AgentState(
        cfg, obs_dim, act_dim, policy, q1, q2, q1.copy(), q2.copy(), log_alpha, 0.0, te,
        adam_init(policy), adam_init(q1), adam_init(q2), adam_init(log_alpha),
    )


def reinit_networks(agent: AgentState, rng: np.random.Generator) -> None:
    """Fresh actor, critics, targets and their optimizer states (temperature untouched)."""
    cfg = agent.cfg
    agent.policy = init_policy(cfg, agent.obs_dim, agent.act_dim, rng)
    agent.q1 = init_critic(cfg, agent.obs_dim, agent.act_dim, rng)
    agent.q2 = init_critic(cfg, agent.obs_dim, agent.act_dim, rng)
    agent.q1_targ, agent.q2_targ = agent.q1.copy(), agent.q2.copy()
    agent.opt_policy, agent.opt_q1, agent.opt_q2 = adam_init(agent.policy), adam_init(agent.q1), adam_init(agent.q2)


def update_average_reward(rbar: float, r: float, step_size: float) -> float:
    """``(1 - step_size) * rbar + step_size * r``, written incrementally.

    The incremental form accumulates less rounding error for small step sizes.
    """
    return rbar + step_size * (r - rbar)


def polyak_update(target: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    return approx.polyak_update(target, online, tau)


# -- losses ----------------------------------------------------------------------


@dataclass
class CriticInfo:
    loss: float
    target: np.ndarray
    q1: np.ndarray
    q2: np.ndarray


def critic_targets(batch: Batch, agent: AgentState, noise_next: np.ndarray, mode: Optional[str] = None,
                   reward_bonus: Optional[np.ndarray] = None) -> np.ndarray:
    """TD targets; no gradient flows through them."""
    mode = mode or agent.cfg.mode
    mu, log_std = policy_head(approx.mlp_forward(agent.policy, batch.next_obs), agent.act_dim)
    a_next, logp_next, _ = squash_sample(mu, log_std, noise_next)
    sa = np.concatenate([batch.next_obs, a_next], axis=1)
    q_next = np.minimum(approx.mlp_forward(agent.q1_targ, sa)[:, 0], approx.mlp_forward(agent.q2_targ, sa)[:, 0])
    soft_v = q_next - agent.alpha * logp_next
    r = batch.rew if reward_bonus is None else batch.rew + reward_bonus
    if mode == "continuing":
        return r - agent.rbar + agent.cfg.gamma * soft_v
    cont = 1.0 - batch.terminal.astype(np.float64)
    return r + agent.cfg.gamma * cont * soft_v


def critic_loss(batch: Batch, agent: AgentState, noise_next: np.ndarray, mode: Optional[str] = None,
                reward_bonus: Optional[np.ndarray] = None):
    """Summed semi-gradient squared TD error of both critics.

    Returns ``(loss, grad_q1, grad_q2, info)``.
    """
    if len(batch) == 0:
        raise EmptyBuffer("empty batch")
    y = critic_targets(batch, agent, noise_next, mode, reward_bonus)
    sa = np.concatenate([batch.obs, batch.act], axis=1)
    n = len(batch)
    out1, c1 = forward_cache(agent.q1, sa)
    out2, c2 = forward_cache(agent.q2, sa)
    d1 = out1[:, 0] - y
    d2 = out2[:, 0] - y
    loss = 0.5 * (float(d1 @ d1) + float(d2 @ d2)) / n
    g1, _ = mlp_backward(agent.q1, c1, d1[:, None] / n)
    g2, _ = mlp_backward(agent.q2, c2, d2[:, None] / n)
    return loss, g1, g2, CriticInfo(loss, y, out1[:, 0], out2[:, 0])


@dataclass
class ActorInfo:
    objective: float
    actions: np.ndarray
    logp: np.ndarray
    q_min: np.ndarray
    mu: np.ndarray
    log_std: np.ndarray


def min_q_and_action_grad(q1: MlpParams, q2: MlpParams, obs, actions, upstream: Optional[np.ndarray] = None):
    """``min(Q1, Q2)`` at ``(obs, actions)`` and, if ``upstream`` is given, the
    gradient of ``sum(upstream * min_q)`` with respect to the actions."""
    if upstream is None:
        sa = np.concatenate([obs, actions], axis=1)
        return np.minimum(approx.mlp_forward(q1, sa)[:, 0], approx.mlp_forward(q2, sa)[:, 0]), None
    qmin, back = _min_q_cached(q1, q2, obs, actions)
    return qmin, back(upstream)


def _min_q_cached(q1, q2, obs, actions):
    sa = np.concatenate([obs, actions], axis=1)
    o1, c1 = forward_cache(q1, sa)
    o2, c2 = forward_cache(q2, sa)
    first = o1[:, 0] <= o2[:, 0]
    qmin = np.where(first, o1[:, 0], o2[:, 0])
    k = obs.shape[1]

    def back(upstream):
        _, dx1 = mlp_backward(q1, c1, (upstream * first)[:, None], input_grad=True)
        _, dx2 = mlp_backward(q2, c2, (upstream * ~first)[:, None], input_grad=True)
        return dx1[:, k:] + dx2[:, k:]

    return qmin, back


def actor_objective(policy: MlpParams, q1: MlpParams, q2: MlpParams, obs, noise, act_dim: int,
                    q_coef=1.0, ent_coef=0.0, norm_penalty: float = 0.0):
    """``mean(q_coef * min_q(s, a) - ent_coef * log pi(a|s)) - norm_penalty * mean(||a||)``
    with reparameterized actions, and its gradient with respect to the policy.

    Policy objective, scaled objective, entropy-only objective and the policy
    action penalty are all special cases. ``q_coef`` may be a callable of the
    batch's min-Q values and ``ent_coef`` a callable of its log-probabilities;
    either is evaluated once and treated as a constant for the gradient.
    """
    n = obs.shape[0]
    out, cache = forward_cache(policy, obs)
    raw_log_std = out[:, act_dim:]
    mu = out[:, :act_dim]
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    a, logp, _ = squash_sample(mu, log_std, noise)
    one_m = 1.0 - a * a
    if callable(ent_coef):
        ent_coef = float(ent_coef(logp))

    if callable(q_coef) or q_coef != 0.0:
        qmin, back = _min_q_cached(q1, q2, obs, a)
        if callable(q_coef):
            q_coef = float(q_coef(qmin))
        grad_a = back(np.full(n, q_coef / n)) if q_coef != 0.0 else np.zeros_like(a)
    else:
        qmin, grad_a = np.zeros(n), np.zeros_like(a)
    objective = float(q_coef * qmin.mean() - ent_coef * logp.mean())
    if norm_penalty != 0.0:
        norms = np.sqrt((a * a).sum(axis=1))
        objective -= norm_penalty * float(norms.mean())
        grad_a = grad_a - norm_penalty / n * np.divide(a, norms[:, None], out=np.zeros_like(a),
                                                       where=norms[:, None] > 0)
    # d logp / dx through the tanh correction; the Gaussian term is constant in x
    # under reparameterization and contributes -1 to d logp / d log_std.
    glp = -ent_coef / n
    dx = grad_a * one_m + glp * (2.0 * a * one_m / (one_m + EPS_TANH))
    dls = dx * std * noise - glp
    dls = dls * ((raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX))
    grad, _ = mlp_backward(policy, cache, np.concatenate([dx, dls], axis=1))
    return objective, grad, ActorInfo(objective, a, logp, qmin, mu, log_std)


def policy_objective(obs, agent: AgentState, noise, alpha: Optional[float] = None):
    """SAC policy objective ``E[min_j Q_j(s, a) - alpha log pi(a|s)]`` (to maximize)."""
    alpha = agent.alpha if alpha is None else alpha
    return actor_objective(agent.policy, agent.q1, agent.q2, obs, noise, agent.act_dim, 1.0, alpha)


def temperature_objective(logp: np.ndarray, log_alpha: float, target_entropy: float):
    """``J(alpha) = mean(-alpha (log pi + H))``.

    Returns ``(J, dJ/dalpha, dJ/dlog_alpha)``.
    """
    alpha = math.exp(log_alpha)
    m = float(np.mean(logp + target_entropy))
    return -alpha * m, -m, -alpha * m


# -- training loop ---------------------------------------------------------------


class Hooks:
    """Extension points for the training step. The defaults give plain SAC."""

    train_critic = True

    def behavior_action(self, agent: AgentState, obs, rng) -> Optional[np.ndarray]:
        return None

    def learning_reward(self, outcome: StepOutcome, action) -> float:
        return outcome.reward_modified

    def observe_reward(self, agent: AgentState, r: float) -> None:
        pass

    def before_update(self, agent: AgentState) -> None:
        pass

    def critic_bonus(self, agent: AgentState, batch: Batch) -> Optional[np.ndarray]:
        return None

    def after_critic(self, agent: AgentState, batch: Batch) -> None:
        pass

    def policy_objective(self, agent: AgentState, obs, noise):
        return policy_objective(obs, agent, noise)

    def alpha_lr(self, agent: AgentState) -> float:
        return agent.cfg.lr_alpha

    def after_step(self, agent: AgentState) -> None:
        pass


PLAIN = Hooks()


@dataclass
class UpdateInfo:
    critic_loss: float
    policy_objective: float
    entropy: float
    alpha: float


def _check_finite(agent: AgentState, **values) -> None:
    bad = {k: v for k, v in values.items() if not np.all(np.isfinite(v))}
    if bad:
        raise NumericDivergence(
            f"non-finite values at env step {agent.env_steps}: {sorted(bad)}",
            {"env_step": agent.env_steps, "updates": agent.updates, "alpha": agent.alpha,
             "rbar": agent.rbar, **{k: np.asarray(v).tolist() for k, v in values.items()}},
        )


def sac_update(agent: AgentState, buffer: ReplayBuffer, rng: np.random.Generator, hooks: Hooks = PLAIN) -> UpdateInfo:
    cfg = agent.cfg
    batch = buffer.sample(rng, cfg.batch_size)
    noise_next = rng.standard_normal((cfg.batch_size, agent.act_dim))
    noise = rng.standard_normal((cfg.batch_size, agent.act_dim))
    hooks.before_update(agent)

    bonus = hooks.critic_bonus(agent, batch)
    closs, g1, g2, _ = critic_loss(batch, agent, noise_next, reward_bonus=bonus)
    hooks.after_critic(agent, batch)
    pobj, gpol, ainfo = hooks.policy_objective(agent, batch.obs, noise)
    _, _, galpha = temperature_objective(ainfo.logp, float(agent.log_alpha[0]), agent.target_entropy)
    _check_finite(agent, critic_loss=closs, policy_objective=pobj)

    q1_old, q2_old = agent.q1, agent.q2
    if hooks.train_critic:
        agent.q1, agent.opt_q1 = adam_step(agent.q1, g1, agent.opt_q1, cfg.lr_critic)
        agent.q2, agent.opt_q2 = adam_step(agent.q2, g2, agent.opt_q2, cfg.lr_critic)
    agent.policy, agent.opt_policy = adam_step(agent.policy, -gpol, agent.opt_policy, cfg.lr_actor)
    lr_alpha = hooks.alpha_lr(agent)
    if lr_alpha > 0:
        agent.log_alpha, agent.opt_alpha = adam_update(agent.log_alpha, np.array([galpha]), agent.opt_alpha, lr_alpha)
    if hooks.train_critic:
        agent.q1_targ = polyak_update(agent.q1_targ, q1_old, cfg.tau)
        agent.q2_targ = polyak_update(agent.q2_targ, q2_old, cfg.tau)
    agent.updates += 1
    return UpdateInfo(closs, pobj, float(-ainfo.logp.mean()), agent.alpha)


def act(agent: AgentState, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mu, log_std = policy_head(approx.mlp_forward(agent.policy, obs), agent.act_dim)
    return sample_action(mu, log_std, rng)[0]


@dataclass
class StepRecord:
    obs: np.ndarray
    action: np.ndarray
    outcome: StepOutcome
    learning_reward: float
    update: Optional[UpdateInfo] = None


@dataclass
class Streams:
    """Independent random streams for one run."""

    action: np.random.Generator
    update: np.random.Generator


def train_step(agent: AgentState, env: ContinuingEnv, buffer: ReplayBuffer, obs: np.ndarray,
               streams: Streams, hooks: Hooks = PLAIN) -> tuple[np.ndarray, StepRecord]:
    """One environment step followed by (after warm-up) one gradient update."""
    cfg = agent.cfg
    action = hooks.behavior_action(agent, obs, streams.action)
    if action is None:
        if agent.env_steps < cfg.warmup_steps:
            action = streams.action.uniform(-1.0, 1.0, size=agent.act_dim)
        else:
            action = act(agent, obs, streams.action)
    outcome = env.step(action)
    r = hooks.learning_reward(outcome, action)
    agent.rbar = update_average_reward(agent.rbar, r, cfg.alpha_rbar)
    buffer.add(make_transition(obs, action, outcome, r, cfg.mode))
    agent.env_steps += 1
    hooks.observe_reward(agent, r)
    info = None
    if agent.env_steps >= cfg.warmup_steps:
        info = sac_update(agent, buffer, streams.update, hooks)
    hooks.after_step(agent)
    return outcome.observation_after, StepRecord(obs, action, outcome, r, info)
