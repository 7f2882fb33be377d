"""Exact oracle and invariant checks, runnable without a test framework.

Each check returns a :class:`CheckResult`; ``csac check`` prints one line per
check and the test suite asserts on the same functions.
"""

from __future__ import annotations

import itertools
import math
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from . import approx
from .agent import (
    PLAIN,
    AgentConfig,
    AgentState,
    Batch,
    ReplayBuffer,
    Streams,
    actor_objective,
    critic_loss,
    init_agent,
    policy_objective,
    squash_sample,
    squashed_log_prob,
    temperature_objective,
    train_step,
    update_average_reward,
)
from .envs import EnvConfig, ResetEvent, make_env
from .interventions import (
    InterventionConfig,
    InterventionRngs,
    Interventions,
    ToggleState,
    action_penalty_policy,
    action_penalty_reward,
    entropy_only_objective,
    init_rnd,
    rnd_intrinsic,
    rnd_loss,
    rnd_raw_intrinsic,
    scaled_policy_objective,
    toggle_decide,
    toggle_observe,
    update_qscale,
)

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.number:>2} {self.name}: {self.detail}"


# -- small random problems ----------------------------------------------------------

def tiny_agent(obs_dim=3, act_dim=2, width=8, seed=0, **cfg) -> AgentState:
    cfg = AgentConfig(hidden=(width, width), batch_size=16, **cfg)
    agent = init_agent(cfg, obs_dim, act_dim, np.random.default_rng(seed))
    agent.rbar = 0.3
    agent.log_alpha = np.array([math.log(0.2)])
    return agent


def random_batch(obs_dim, act_dim, n=16, seed=1, episodic=False) -> Batch:
    rng = np.random.default_rng(seed)
    term = rng.random(n) < 0.3 if episodic else None
    return Batch(rng.normal(size=(n, obs_dim)), rng.uniform(-0.9, 0.9, (n, act_dim)),
                 rng.normal(size=n), rng.normal(size=(n, obs_dim)), term)


def _with(params: approx.MlpParams, flat) -> approx.MlpParams:
    return params.with_flat(np.array(flat, dtype=np.float64))


def gradient_cases(seed: int = 0, width: int = 8) -> dict[str, tuple[Callable, np.ndarray]]:
    """Named ``(loss, theta)`` pairs whose analytic gradients are checked."""
    obs_dim, act_dim = 3, 2
    agent = tiny_agent(obs_dim, act_dim, width, seed)
    batch = random_batch(obs_dim, act_dim, seed=seed + 1)
    rng = np.random.default_rng(seed + 2)
    noise_next = rng.standard_normal((len(batch), act_dim))
    noise = rng.standard_normal((len(batch), act_dim))
    cases = {}

    def critic_case(which):
        def f(theta):
            a = replace(agent, **{which: _with(getattr(agent, which), theta)})
            loss, g1, g2, _ = critic_loss(batch, a, noise_next)
            return loss, (g1 if which == "q1" else g2)
        return f, getattr(agent, which).flat.copy()

    cases["critic q1"] = critic_case("q1")
    cases["critic q2"] = critic_case("q2")

    def policy_case(fn):
        def f(theta):
            a = replace(agent, policy=_with(agent.policy, theta))
            obj, grad, _ = fn(a)
            return obj, grad
        return f, agent.policy.flat.copy()

    cases["policy"] = policy_case(lambda a: policy_objective(batch.obs, a, noise))
    for active in (False, True):
        def scaled(a, active=active):
            tog = ToggleState(alpha_fixed=0.02, eta_q=3.7, active=active)
            return scaled_policy_objective(batch.obs, a, tog, noise, update_scale=False)
        cases[f"scaled policy ({'fixed' if active else 'learned'} temperature)"] = policy_case(scaled)
    cases["entropy-only policy"] = policy_case(lambda a: entropy_only_objective(batch.obs, a, noise))
    cases["policy with action-norm penalty"] = policy_case(
        lambda a: actor_objective(a.policy, a.q1, a.q2, batch.obs, noise, act_dim, 1.0, a.alpha, 0.3))

    logp = policy_objective(batch.obs, agent, noise)[2].logp

    def temp(theta):
        j, _, dlog = temperature_objective(logp, float(theta[0]), agent.target_entropy)
        return j, np.array([dlog])
    cases["temperature (log alpha)"] = (temp, np.array([math.log(0.2)]))

    def temp_alpha(theta):
        j, dalpha, _ = temperature_objective(logp, math.log(float(theta[0])), agent.target_entropy)
        return j, np.array([dalpha])
    cases["temperature (alpha)"] = (temp_alpha, np.array([0.2]))

    rnd = init_rnd(obs_dim, np.random.default_rng(seed + 3), predictor_hidden=(width,) * 4,
                   target_hidden=(width,) * 2, out_dim=width)
    rnd.obs_moments.update(np.random.default_rng(seed + 4).normal(size=(64, obs_dim)))
    masks = (np.arange(len(batch)) % 3 == 0).astype(float)

    def rnd_case(theta):
        r = replace(rnd, predictor=_with(rnd.predictor, theta))
        return rnd_loss(r, batch.next_obs, masks)
    cases["RND predictor"] = (rnd_case, rnd.predictor.flat.copy())

    actions = np.random.default_rng(seed + 5).uniform(-0.9, 0.9, (len(batch), act_dim))

    def pen_policy(theta):
        return action_penalty_policy(1.5, theta.reshape(actions.shape), 0.07)
    cases["policy action penalty (actions)"] = (
        lambda th: (pen_policy(th)[0], pen_policy(th)[1].reshape(-1)), actions.reshape(-1).copy())

    def pen_reward(theta):
        # d/da (r - tau ||a||^2) = -2 tau a
        return action_penalty_reward(0.4, theta, 0.07), -2 * 0.07 * theta
    cases["reward action penalty (actions)"] = (pen_reward, actions[0].copy())
    return cases


def check_gradients(seed: int = 0) -> CheckResult:
    worst, worst_name = 0.0, ""
    for name, (f, theta) in gradient_cases(seed).items():
        err = approx.grad_check(f, theta).max_rel_error
        if err > worst:
            worst, worst_name = err, name
    n = len(gradient_cases(seed))
    return CheckResult(1, "analytic gradients vs central differences", worst < GRAD_TOL,
                       f"{n} objectives, worst relative error {worst:.2e} ({worst_name})")


def rbar_closed_form(c: float, step_size: float, t: int) -> float:
    """``c (1 - (1 - step_size)^t)`` evaluated without cancellation."""
    return -c * math.expm1(t * math.log1p(-step_size))


def check_rbar_closed_form(steps: int = 100_000) -> CheckResult:
    # the tolerance is absolute for rewards of unit scale and relative beyond
    worst = 0.0
    marks = {1, 10, 100, 1000, 10_000, steps}
    for c, step in itertools.product((1.0, -2.5, 0.7, 100.0), (3e-5, 3e-4, 3e-3, 0.1)):
        rbar = 0.0
        for t in range(1, steps + 1):
            rbar = update_average_reward(rbar, c, step)
            if t in marks:
                err = abs(rbar - rbar_closed_form(c, step, t)) / max(1.0, abs(c))
                worst = max(worst, err)
    return CheckResult(2, "average-reward EMA closed form", worst < 1e-12,
                       f"max scaled error {worst:.1e} over {steps} steps")


def check_qscale_fixed_points() -> CheckResult:
    eta, stuck = 1.0, True
    for _ in range(1000):
        eta = update_qscale(eta, np.full(64, 3.14))
        stuck &= eta == 1.0
    worst = 0.0
    for d in (0.3, 1.0, 5.0, 40.0):
        q = np.linspace(0.0, d, 101)
        q = (q - np.percentile(q, 5)) * d / (np.percentile(q, 95) - np.percentile(q, 5))
        eta, target = 1.0, max(d, 1.0)
        for k in range(1, 2001):
            eta = update_qscale(eta, q)
            worst = max(worst, abs(eta - (target + (1.0 - target) * 0.99 ** k)))
    ok = stuck and worst < 1e-9
    return CheckResult(3, "Q-scale fixed points", ok,
                       f"identical Q keeps scale at 1: {stuck}; max EMA deviation {worst:.1e}")


def check_toggle_machine() -> CheckResult:
    bad, cases = [], 0
    for n in range(1, 5):
        for seq in itertools.product((0.0, 0.5, 1.0), repeat=n):
            tog = ToggleState(alpha_fixed=0.02, lr_alpha=1e-3, period=4)
            prev = None
            for perf in seq:
                for _ in range(4):
                    toggle_observe(tog, perf)
                expect_active = prev is not None and perf <= prev
                alpha_hat, lr_hat = toggle_decide(tog, 0.37)
                want = (0.02, 0.0) if expect_active else (0.37, 1e-3)
                cases += 1
                if tog.active != expect_active or (alpha_hat, lr_hat) != want:
                    bad.append(seq)
                prev = perf
    return CheckResult(4, "temperature toggle state machine", not bad,
                       f"{cases} period transitions over all sequences up to length 4, {len(bad)} wrong")


def check_reset_semantics(steps: int = 4000) -> CheckResult:
    penalty = 2.5
    env = make_env(EnvConfig("corridor", time_reset_period=150, reset_penalty=penalty,
                             physics={"flip_speed": 0.1}), np.random.default_rng(0))
    cfg = AgentConfig(hidden=(8, 8), warmup_steps=10**9, buffer_size=steps)
    agent = init_agent(cfg, env.obs_dim, env.act_dim, np.random.default_rng(1))
    buf = ReplayBuffer(env.obs_dim, env.act_dim, steps)
    streams = Streams(np.random.default_rng(2), np.random.default_rng(3))
    obs = env.observation()
    problems, n_state, n_time = [], 0, 0
    for i in range(steps):
        obs, rec = train_step(agent, env, buf, obs, streams)
        out = rec.outcome
        tr = buf.get(i)
        if len(buf) != i + 1:
            problems.append(f"buffer size {len(buf)} after {i + 1} steps")
        if out.reset_event is ResetEvent.STATE_BASED:
            n_state += 1
            if not np.array_equal(tr.next_state, out.post_reset_observation):
                problems.append(f"step {i + 1}: next_state is not the post-reset observation")
            if tr.reward != out.reward_original - penalty:
                problems.append(f"step {i + 1}: reward lacks the penalty")
        elif out.reset_event is ResetEvent.TIME_BASED:
            n_time += 1
            if not np.array_equal(tr.next_state, out.post_reset_observation) or tr.reward != out.reward_original:
                problems.append(f"step {i + 1}: time reset transition altered")
    if buf.terminal is not None:
        problems.append("continuing buffer stores terminal flags")
    if n_state == 0 or n_time == 0:
        problems.append(f"scenario did not exercise both reset kinds ({n_state}, {n_time})")
    detail = f"{n_state} state-based and {n_time} time-based resets over {steps} steps"
    return CheckResult(5, "reset transition semantics", not problems,
                       detail + ("" if not problems else f"; {problems[0]}"))


def check_squashed_density() -> CheckResult:
    worst = 0.0
    for mu, log_std in itertools.product((-1.0, 0.0, 0.7, 1.5), (-1.0, -0.3, 0.0, 0.5)):
        dens = lambda a: math.exp(float(squashed_log_prob(np.array([a]), mu, log_std)))  # noqa: E731
        total, _ = integrate.quad(dens, -1.0, 1.0, limit=400, epsabs=1e-10, epsrel=1e-10)
        worst = max(worst, abs(total - 1.0))
    _, logp, _ = squash_sample(np.array([[0.0, 40.0]]), np.array([[2.0, 2.0]]), np.array([[50.0, -50.0]]))
    finite = bool(np.all(np.isfinite(logp)))
    return CheckResult(6, "squashed Gaussian normalization", worst < 1e-3 and finite,
                       f"max |integral - 1| = {worst:.1e}; saturated log-probs finite: {finite}")


def check_rnd() -> CheckResult:
    obs_dim = 4
    rnd = init_rnd(obs_dim, np.random.default_rng(0), predictor_hidden=(8, 8), target_hidden=(8, 8), out_dim=8)
    rnd = replace(rnd, predictor=rnd.target.copy())
    s = np.random.default_rng(1).normal(size=(32, obs_dim))
    stub_zero = float(np.max(np.abs(rnd_raw_intrinsic(rnd, s)))) == 0.0
    stub_zero &= float(np.max(np.abs(rnd_intrinsic(rnd, s)))) == 0.0

    rnd = init_rnd(obs_dim, np.random.default_rng(2), predictor_hidden=(8,) * 4, target_hidden=(8, 8), out_dim=8)
    rnd.obs_moments.update(s)
    zero_loss, zero_grad = rnd_loss(rnd, s, np.zeros(len(s)))
    zeros_ok = zero_loss == 0.0 and not np.any(zero_grad)

    masks = (np.random.default_rng(3).random(len(s)) < 0.25).astype(float)
    loss, _ = rnd_loss(rnd, s, masks)
    x = np.clip((s - rnd.obs_moments.mean) / np.sqrt(rnd.obs_moments.var + 1e-8), -5.0, 5.0)
    direct = 0.0
    for i in np.flatnonzero(masks):
        d = approx.mlp_forward(rnd.predictor, x[i]) - approx.mlp_forward(rnd.target, x[i])
        direct += float(d @ d) / obs_dim
    direct /= max(masks.sum(), 1.0)
    diff = abs(loss - direct)
    ok = stub_zero and zeros_ok and diff < 1e-12
    return CheckResult(7, "RND intrinsic reward and masked loss", ok,
                       f"identical nets give 0: {stub_zero}; zero masks give 0: {zeros_ok}; "
                       f"masked loss vs direct {diff:.1e}")


def _plain_vs_hooks(steps: int = 300) -> bool:
    def simulate(hooks_factory):
        env = make_env(EnvConfig("pendulum"), np.random.default_rng(0))
        cfg = AgentConfig(hidden=(8, 8), batch_size=16, warmup_steps=50)
        agent = init_agent(cfg, env.obs_dim, env.act_dim, np.random.default_rng(1))
        buf = ReplayBuffer(env.obs_dim, env.act_dim, 10_000)
        streams = Streams(np.random.default_rng(2), np.random.default_rng(3))
        hooks = hooks_factory(agent)
        obs = env.observation()
        for _ in range(steps):
            obs, _ = train_step(agent, env, buf, obs, streams, hooks)
        return agent
    a = simulate(lambda agent: PLAIN)
    b = simulate(lambda agent: Interventions(InterventionConfig(), agent, InterventionRngs(
        *(np.random.default_rng(10 + i) for i in range(4)))))
    same = all(np.array_equal(getattr(a, k).flat, getattr(b, k).flat)
               for k in ("policy", "q1", "q2", "q1_targ", "q2_targ"))
    return same and np.array_equal(a.log_alpha, b.log_alpha) and a.rbar == b.rbar


def check_reductions() -> CheckResult:
    plain = _plain_vs_hooks()

    agent = tiny_agent(obs_dim=3, act_dim=1)
    batch = random_batch(3, 1)
    noise = np.random.default_rng(7).standard_normal((len(batch), 1))
    j, gj, _ = policy_objective(batch.obs, agent, noise)
    tog = ToggleState(eta_q=1.0, active=False)
    js, gjs, _ = scaled_policy_objective(batch.obs, agent, tog, noise, update_scale=False)
    scaled_same = abs(j - js) <= 1e-15 * max(1.0, abs(j)) and np.allclose(gj, gjs, rtol=0, atol=1e-15)

    agent = tiny_agent()
    agent.rbar = 0.0
    b = random_batch(3, 2)
    noise_next = np.random.default_rng(8).standard_normal((len(b), 2))
    lc = critic_loss(b, agent, noise_next, mode="continuing")
    le = critic_loss(replace(b, terminal=np.zeros(len(b), dtype=bool)), agent, noise_next, mode="episodic")
    critic_same = lc[0] == le[0] and np.array_equal(lc[1], le[1]) and np.array_equal(lc[2], le[2])

    ok = plain and scaled_same and critic_same
    return CheckResult(8, "reductions to plain continuing SAC", ok,
                       f"interventions off bit-identical: {plain}; scaled objective equals plain: "
                       f"{scaled_same}; centered loss with zero average equals episodic: {critic_same}")


def check_determinism(out_dir: Optional[Path] = None) -> CheckResult:
    from .harness.config import parse_config
    from .harness.run import run_experiment

    text = ("task = corridor\ntotal_steps = 3000\nhidden = 8,8\nbatch_size = 16\n"
            "warmup_steps = 200\ndiag_every = 500\n\n[env]\ntime_reset_period = 250\n"
            "[interventions]\nalpha_toggle = true\n")
    cfg = parse_config(text)
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(out_dir or tmp)
        a = run_experiment(cfg, 3, out_dir=root / "a")
        b = run_experiment(cfg, 3, out_dir=root / "b")
        names = sorted(p.name for p in a.run_dir.glob("*.csv"))
        diff = [n for n in names if (a.run_dir / n).read_bytes() != (b.run_dir / n).read_bytes()]
    return CheckResult(9, "rerun determinism", bool(names) and not diff,
                       f"{len(names)} metric files compared, {len(diff)} differ")


CHECKS = {
    "gradients": check_gradients,
    "rbar": check_rbar_closed_form,
    "qscale": check_qscale_fixed_points,
    "toggle": check_toggle_machine,
    "resets": check_reset_semantics,
    "density": check_squashed_density,
    "rnd": check_rnd,
    "reductions": check_reductions,
    "determinism": check_determinism,
}


def run_checks(only=None) -> list[CheckResult]:
    names = list(CHECKS) if not only else [n for n in CHECKS if n in only]
    return [CHECKS[n]() for n in names]
