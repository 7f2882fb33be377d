"""Native continuing control tasks.

Three tasks share one reset/reward contract:

* ``reacher``  two-link planar arm with a sparse reward of 100 per
  successful reach; the goal only moves after a reach.
* ``corridor`` planar runner between two walls with a forward-velocity
  reward and a state-based reset when it hits a wall too hard.
* ``pendulum`` torque-limited pendulum rewarded for staying upright.

Resets only re-initialize the embodiment. Goals and walls are left alone.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

TASKS = ("reacher", "corridor", "pendulum")


class ResetEvent(str, enum.Enum):
    NONE = "none"
    TIME_BASED = "time_based"
    STATE_BASED = "state_based"


@dataclass
class StepOutcome:
    next_observation: np.ndarray
    reward_modified: float
    reward_original: float
    reset_event: ResetEvent = ResetEvent.NONE
    post_reset_observation: Optional[np.ndarray] = None
    clipped: bool = False

    def __post_init__(self):
        if (self.reset_event is ResetEvent.NONE) != (self.post_reset_observation is None):
            raise ValueError("post_reset_observation must be present exactly when a reset fired")

    @property
    def observation_after(self) -> np.ndarray:
        """The observation the agent acts from next."""
        if self.post_reset_observation is not None:
            return self.post_reset_observation
        return self.next_observation


# -- task physics ----------------------------------------------------------------


@dataclass
class ReacherParams:
    link_lengths: tuple[float, float] = (0.1, 0.1)
    link_masses: tuple[float, float] = (0.1, 0.1)
    joint_damping: float = 0.025
    torque_scale: float = 0.1
    dt: float = 0.02
    substeps: int = 2
    joint_limit: float = 3.0
    elbow_limit: float = 3.0
    d_thresh: float = 0.02
    v_thresh: float = 0.05
    success_reward: float = 100.0
    init_noise: float = 0.1


@dataclass
class CorridorParams:
    half_width: float = 0.5
    mass: float = 1.0
    thrust: float = 4.0
    turn_rate: float = 3.0
    damping: float = 1.0
    dt: float = 0.05
    flip_speed: float = 1.0
    healthy_reward: float = 1.0
    ctrl_cost: float = 0.1
    init_noise: float = 0.1


@dataclass
class PendulumParams:
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    max_torque: float = 2.0
    max_speed: float = 8.0
    dt: float = 0.05
    upright_band: float = 0.2
    init_noise: float = 0.1


PHYSICS = {"reacher": ReacherParams, "corridor": CorridorParams, "pendulum": PendulumParams}


@dataclass
class EnvConfig:
    task: str = "reacher"
    time_reset_period: Optional[int] = None
    state_reset_enabled: bool = True
    reset_penalty: float = 0.0
    remove_constant_term: bool = False
    physics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.time_reset_period is not None and int(self.time_reset_period) < 1:
            raise ValueError("time_reset_period must be >= 1")
        if self.reset_penalty < 0:
            raise ValueError("reset_penalty must be nonnegative")
        known = {f.name for f in fields(PHYSICS[self.task])}
        unknown = set(self.physics) - known
        if unknown:
            raise ValueError(f"unknown {self.task} physics parameters: {sorted(unknown)}")

    def params(self):
        p = PHYSICS[self.task]()
        kw = {}
        for k, v in self.physics.items():
            cur = getattr(p, k)
            kw[k] = tuple(v) if isinstance(cur, tuple) else type(cur)(v)
        return replace(p, **kw)

    @property
    def constant_term(self) -> float:
        """Per-step constant reward component that the task pays out."""
        if self.task == "corridor":
            return self.params().healthy_reward
        return 0.0


def transform_reward(reward_original: float, reset_event: ResetEvent, cfg: EnvConfig) -> float:
    """Learning reward: drop the constant term and charge state-based resets."""
    r = reward_original
    if cfg.remove_constant_term:
        r -= cfg.constant_term
    if reset_event is ResetEvent.STATE_BASED:
        r -= cfg.reset_penalty
    return r


def reach_success(distance: float, speed: float, params: ReacherParams) -> bool:
    return distance < params.d_thresh and speed < params.v_thresh


# -- states ----------------------------------------------------------------------


@dataclass
class ReacherState:
    q: tuple[float, float]
    qd: tuple[float, float]
    goal: tuple[float, float]

    @property
    def base_angle(self) -> float:
        return self.q[0]


@dataclass
class CorridorState:
    pos: tuple[float, float]
    vel: tuple[float, float]
    heading: float
    half_width: float


@dataclass
class PendulumState:
    angle: float
    speed: float


def wrap_angle(x: float) -> float:
    """Map to (-pi, pi]."""
    y = math.fmod(x + math.pi, 2.0 * math.pi)
    if y <= 0.0:
        y += 2.0 * math.pi
    return y - math.pi


# -- environments -----------------------------------------------------------------


class ContinuingEnv:
    """Step/reset bookkeeping shared by every task.

    The global step counter starts at 1 for the first call to :meth:`step`, so
    time-based resets fire at steps ``p, 2p, 3p, ...``.
    """

    obs_dim: int
    act_dim: int

    def __init__(self, cfg: EnvConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.p = cfg.params()
        self.rng = rng
        self.t = 0
        self.clip_count = 0
        self.state = self.initial_state()

    # task hooks
    def initial_state(self):
        raise NotImplementedError

    def dynamics(self, state, action: np.ndarray):
        """Deterministic transition: ``(state', reward_original, failed)``."""
        raise NotImplementedError

    def reset_embodiment(self, state):
        raise NotImplementedError

    def observe(self, state) -> np.ndarray:
        raise NotImplementedError

    def after_dynamics(self, state):
        """Stochastic world events that follow the dynamics (goal relocation)."""
        return state, 0.0

    # shared logic
    def observation(self) -> np.ndarray:
        return self.observe(self.state)

    def step(self, action) -> StepOutcome:
        a = np.asarray(action, dtype=np.float64).reshape(self.act_dim)
        clipped = bool(np.any(np.abs(a) > 1.0))
        if clipped:
            self.clip_count += 1
            a = np.clip(a, -1.0, 1.0)
        self.t += 1
        state, r, failed = self.dynamics(self.state, a)
        state, bonus = self.after_dynamics(state)
        r += bonus
        event = ResetEvent.NONE
        if failed and self.cfg.state_reset_enabled:
            event = ResetEvent.STATE_BASED
        elif self.cfg.time_reset_period and self.t % self.cfg.time_reset_period == 0:
            event = ResetEvent.TIME_BASED
        next_obs = self.observe(state)
        post = None
        if event is not ResetEvent.NONE:
            state = self.reset_embodiment(state)
            post = self.observe(state)
        self.state = state
        return StepOutcome(
            next_observation=next_obs,
            reward_modified=transform_reward(r, event, self.cfg),
            reward_original=r,
            reset_event=event,
            post_reset_observation=post,
            clipped=clipped,
        )

    def get_state(self) -> dict:
        return {
            "t": self.t,
            "clip_count": self.clip_count,
            "state": self.state,
            "rng": self.rng.bit_generator.state,
        }

    def set_state(self, snap: dict) -> None:
        self.t = snap["t"]
        self.clip_count = snap["clip_count"]
        self.state = snap["state"]
        self.rng.bit_generator.state = snap["rng"]


class Reacher(ContinuingEnv):
    obs_dim = 10
    act_dim = 2

    def _noise(self) -> float:
        return float(self.rng.uniform(-self.p.init_noise, self.p.init_noise))

    def reach_radii(self) -> tuple[float, float]:
        l1, l2 = self.p.link_lengths
        e = self.p.elbow_limit
        inner = math.hypot(l1 + l2 * math.cos(e), l2 * math.sin(e))
        return inner, l1 + l2

    def sample_goal(self) -> tuple[float, float]:
        inner, outer = self.reach_radii()
        while True:
            x, y = self.rng.uniform(-outer, outer, size=2)
            r = math.hypot(x, y)
            if inner <= r <= outer:
                return float(x), float(y)

    def initial_state(self) -> ReacherState:
        pose = self.reset_embodiment(ReacherState((0.0, 0.0), (0.0, 0.0), (0.0, 0.0)))
        return replace(pose, goal=self.sample_goal())

    def reset_embodiment(self, state: ReacherState) -> ReacherState:
        q = (self._noise(), self._noise())
        qd = (self._noise(), self._noise())
        return ReacherState(q, qd, state.goal)

    def fingertip(self, q) -> tuple[float, float]:
        l1, l2 = self.p.link_lengths
        return (
            l1 * math.cos(q[0]) + l2 * math.cos(q[0] + q[1]),
            l1 * math.sin(q[0]) + l2 * math.sin(q[0] + q[1]),
        )

    def fingertip_velocity(self, q, qd) -> tuple[float, float]:
        l1, l2 = self.p.link_lengths
        s1, c1 = math.sin(q[0]), math.cos(q[0])
        s12, c12 = math.sin(q[0] + q[1]), math.cos(q[0] + q[1])
        w12 = qd[0] + qd[1]
        return (-l1 * s1 * qd[0] - l2 * s12 * w12, l1 * c1 * qd[0] + l2 * c12 * w12)

    def dynamics(self, state: ReacherState, action):
        p = self.p
        l1, l2 = p.link_lengths
        m1, m2 = p.link_masses
        lc1, lc2 = l1 / 2, l2 / 2
        i1, i2 = m1 * l1 * l1 / 12, m2 * l2 * l2 / 12
        tau1 = p.torque_scale * float(action[0])
        tau2 = p.torque_scale * float(action[1])
        q1, q2 = state.q
        w1, w2 = state.qd
        h = p.dt / p.substeps
        for _ in range(p.substeps):
            c2, s2 = math.cos(q2), math.sin(q2)
            m11 = i1 + i2 + m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2 * l1 * lc2 * c2)
            m12 = i2 + m2 * (lc2 * lc2 + l1 * lc2 * c2)
            m22 = i2 + m2 * lc2 * lc2
            k = m2 * l1 * lc2 * s2
            f1 = tau1 + k * (2 * w1 * w2 + w2 * w2) - p.joint_damping * w1
            f2 = tau2 - k * w1 * w1 - p.joint_damping * w2
            det = m11 * m22 - m12 * m12
            acc1 = (m22 * f1 - m12 * f2) / det
            acc2 = (m11 * f2 - m12 * f1) / det
            w1 += acc1 * h
            w2 += acc2 * h
            q1 += w1 * h
            q2 += w2 * h
            if q1 > p.joint_limit:
                q1, w1 = p.joint_limit, min(w1, 0.0)
            elif q1 < -p.joint_limit:
                q1, w1 = -p.joint_limit, max(w1, 0.0)
            if q2 > p.elbow_limit:
                q2, w2 = p.elbow_limit, min(w2, 0.0)
            elif q2 < -p.elbow_limit:
                q2, w2 = -p.elbow_limit, max(w2, 0.0)
        return ReacherState((q1, q2), (w1, w2), state.goal), 0.0, False

    def after_dynamics(self, state: ReacherState):
        tip = self.fingertip(state.q)
        vel = self.fingertip_velocity(state.q, state.qd)
        dist = math.hypot(tip[0] - state.goal[0], tip[1] - state.goal[1])
        if reach_success(dist, math.hypot(*vel), self.p):
            return replace(state, goal=self.sample_goal()), self.p.success_reward
        return state, 0.0

    def observe(self, state: ReacherState) -> np.ndarray:
        q1, q2 = state.q
        tip = self.fingertip(state.q)
        gx, gy = state.goal
        return np.array([
            math.cos(q1), math.cos(q2), math.sin(q1), math.sin(q2),
            gx, gy, state.qd[0], state.qd[1], tip[0] - gx, tip[1] - gy,
        ])


class Corridor(ContinuingEnv):
    obs_dim = 6
    act_dim = 2

    def _noise(self) -> float:
        return float(self.rng.uniform(-self.p.init_noise, self.p.init_noise))

    def initial_state(self) -> CorridorState:
        return self.reset_embodiment(CorridorState((0.0, 0.0), (0.0, 0.0), 0.0, self.p.half_width))

    def reset_embodiment(self, state: CorridorState) -> CorridorState:
        return CorridorState((0.0, 0.0), (0.0, 0.0), self._noise(), state.half_width)

    def dynamics(self, state: CorridorState, action):
        p = self.p
        heading = state.heading + p.turn_rate * float(action[1]) * p.dt
        force = p.thrust * float(action[0])
        vx = state.vel[0] + (force * math.cos(heading) / p.mass - p.damping * state.vel[0]) * p.dt
        vy = state.vel[1] + (force * math.sin(heading) / p.mass - p.damping * state.vel[1]) * p.dt
        x = state.pos[0] + vx * p.dt
        y = state.pos[1] + vy * p.dt
        failed = False
        w = state.half_width
        if abs(y) > w:
            impact = abs(vy)
            y = math.copysign(w, y)
            vy = 0.0
            failed = impact > p.flip_speed
        forward = (x - state.pos[0]) / p.dt
        ctrl = p.ctrl_cost * float(action[0] ** 2 + action[1] ** 2)
        reward = forward + p.healthy_reward - ctrl
        return CorridorState((x, y), (vx, vy), wrap_angle(heading), w), reward, failed

    def observe(self, state: CorridorState) -> np.ndarray:
        w = state.half_width
        return np.array([
            state.pos[1], state.vel[0], state.vel[1],
            math.cos(state.heading), math.sin(state.heading), w - abs(state.pos[1]),
        ])


class Pendulum(ContinuingEnv):
    obs_dim = 3
    act_dim = 1

    def _noise(self) -> float:
        return float(self.rng.uniform(-self.p.init_noise, self.p.init_noise))

    def initial_state(self) -> PendulumState:
        return self.reset_embodiment(PendulumState(math.pi, 0.0))

    def reset_embodiment(self, state: PendulumState) -> PendulumState:
        return PendulumState(wrap_angle(math.pi + self._noise()), self._noise())

    def dynamics(self, state: PendulumState, action):
        p = self.p
        u = p.max_torque * float(action[0])
        acc = 3 * p.gravity / (2 * p.length) * math.sin(state.angle) + 3.0 / (p.mass * p.length**2) * u
        speed = min(max(state.speed + acc * p.dt, -p.max_speed), p.max_speed)
        angle = wrap_angle(state.angle + speed * p.dt)
        reward = 1.0 if abs(angle) < p.upright_band else 0.0
        return PendulumState(angle, speed), reward, False

    def observe(self, state: PendulumState) -> np.ndarray:
        return np.array([math.cos(state.angle), math.sin(state.angle), state.speed])


ENVS = {"reacher": Reacher, "corridor": Corridor, "pendulum": Pendulum}


def make_env(cfg: EnvConfig, rng: np.random.Generator) -> ContinuingEnv:
    return ENVS[cfg.task](cfg, rng)


def env_dims(task: str) -> tuple[int, int]:
    cls = ENVS[task]
    return cls.obs_dim, cls.act_dim


def physics_dict(cfg: EnvConfig) -> dict:
    return asdict(cfg.params())
