import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from csac.agent import (
    LOG_STD_MIN,
    AgentConfig,
    Batch,
    ContractViolation,
    EmptyBuffer,
    NumericDivergence,
    ReplayBuffer,
    Streams,
    Transition,
    act,
    actor_objective,
    critic_loss,
    init_agent,
    make_transition,
    policy_objective,
    polyak_update,
    rewrite_reset_transition,
    sac_update,
    sample_action,
    squash_sample,
    squashed_log_prob,
    temperature_objective,
    train_step,
    update_average_reward,
)
from csac.approx import MlpParams, grad_check, init_mlp, zeros_like_mlp
from csac.envs import EnvConfig, ResetEvent, StepOutcome, make_env


def small_agent(obs_dim=3, act_dim=2, seed=0, **kw):
    cfg = AgentConfig(hidden=(8, 8), batch_size=16, warmup_steps=kw.pop("warmup_steps", 10), **kw)
    return init_agent(cfg, obs_dim, act_dim, np.random.default_rng(seed))


def random_batch(n, obs_dim, act_dim, seed=0, terminal=None):
    rng = np.random.default_rng(seed)
    return Batch(rng.normal(size=(n, obs_dim)), rng.uniform(-0.9, 0.9, (n, act_dim)),
                 rng.normal(size=n), rng.normal(size=(n, obs_dim)), terminal)


def streams(seed=0):
    return Streams(np.random.default_rng(seed), np.random.default_rng(seed + 100))


# -- policy head ---------------------------------------------------------------------


def test_tight_distribution_sits_at_mean():
    a, logp = sample_action(np.zeros(3), np.full(3, LOG_STD_MIN), np.random.default_rng(0))
    assert np.all(np.abs(a) < 1e-6)
    assert np.isfinite(logp)


def test_saturated_actions_have_finite_log_prob():
    a, logp = sample_action(np.full(2, 10.0), np.full(2, LOG_STD_MIN), np.random.default_rng(0))
    assert np.allclose(a, 1.0)
    assert np.isfinite(logp)


def test_density_integrates_to_one():
    mu, ls = np.array([0.4]), np.array([-0.3])
    val, _ = integrate.quad(lambda a: math.exp(squashed_log_prob([a], mu, ls)), -1, 1, limit=200)
    assert val == pytest.approx(1.0, abs=1e-3)


def test_log_prob_matches_sampled_value():
    mu, ls = np.array([0.2, -0.5]), np.array([-1.0, 0.1])
    a, logp, _ = squash_sample(mu, ls, np.array([0.3, -0.2]))
    assert squashed_log_prob(a, mu, ls) == pytest.approx(logp, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 2), st.floats(-5, 5))
def test_actions_bounded_and_log_prob_finite(mu, ls, z):
    a, logp, _ = squash_sample(np.array([mu]), np.array([ls]), np.array([z]))
    assert np.all(np.abs(a) <= 1.0)
    assert np.isfinite(logp)


# -- average reward ------------------------------------------------------------------


def test_average_reward_examples():
    assert update_average_reward(0.0, 0.0, 3e-4) == 0.0
    assert update_average_reward(0.0, 1.0, 3e-4) == pytest.approx(3e-4, abs=1e-18)
    rbar, c, s = 0.0, 2.5, 3e-4
    for _ in range(1000):
        rbar = update_average_reward(rbar, c, s)
    assert rbar == pytest.approx(c * (1 - (1 - s) ** 1000), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=200), st.floats(1e-5, 1.0))
def test_average_reward_is_contained(rewards, s):
    rbar = 0.0
    lo, hi = min(0.0, *rewards), max(0.0, *rewards)
    for r in rewards:
        rbar = update_average_reward(rbar, r, s)
        assert lo - 1e-9 <= rbar <= hi + 1e-9


# -- critic --------------------------------------------------------------------------


def test_zero_networks_with_matching_reward_give_zero_loss():
    ag = small_agent(act_dim=1)
    for name in ("q1", "q2", "q1_targ", "q2_targ"):
        setattr(ag, name, zeros_like_mlp(getattr(ag, name)))
    ag.log_alpha[0] = math.log(1e-300)  # log pi term vanishes
    ag.rbar = 0.7
    b = random_batch(5, 3, 1)
    b.rew[:] = 0.7
    loss, g1, g2, _ = critic_loss(b, ag, np.zeros((5, 1)))
    assert loss == 0.0
    assert np.abs(g1).max() < 1e-250 and np.abs(g2).max() < 1e-250


def scalar_forward(p: MlpParams, x):
    h = list(x)
    layers = p.layers
    for i, (w, b) in enumerate(layers):
        z = [sum(h[k] * w[k][j] for k in range(len(h))) + b[j] for j in range(len(b))]
        h = z if i == len(layers) - 1 else [max(0.0, v) for v in z]
    return h


def test_single_transition_matches_scalar_oracle():
    ag = small_agent(obs_dim=2, act_dim=1, seed=3)
    ag.rbar = 0.25
    b = random_batch(1, 2, 1, seed=4)
    eps = np.array([[0.37]])
    loss, *_ = critic_loss(b, ag, eps)

    # brute-force scalar arithmetic of the same formula
    s, a, r, s2 = list(b.obs[0]), list(b.act[0]), float(b.rew[0]), list(b.next_obs[0])
    mu, raw_ls = scalar_forward(ag.policy, s2)
    ls = min(max(raw_ls, -20.0), 2.0)
    x = mu + math.exp(ls) * 0.37
    a2 = math.tanh(x)
    logp = -0.5 * 0.37**2 - ls - 0.5 * math.log(2 * math.pi) - math.log(1 - a2 * a2 + 1e-6)
    qn = min(scalar_forward(ag.q1_targ, s2 + [a2])[0], scalar_forward(ag.q2_targ, s2 + [a2])[0])
    y = r - 0.25 + 0.99 * (qn - ag.alpha * logp)
    q1 = scalar_forward(ag.q1, s + a)[0]
    q2 = scalar_forward(ag.q2, s + a)[0]
    expected = 0.5 * (y - q1) ** 2 + 0.5 * (y - q2) ** 2
    assert loss == pytest.approx(expected, abs=1e-12)


def test_continuing_equals_episodic_without_rbar_or_terminals():
    ag = small_agent()
    b = random_batch(8, 3, 2, terminal=np.zeros(8, dtype=bool))
    noise = np.random.default_rng(1).normal(size=(8, 2))
    cont = critic_loss(b, ag, noise, mode="continuing")[0]
    epi = critic_loss(b, ag, noise, mode="episodic")[0]
    assert cont == epi


def test_episodic_terminal_masks_bootstrap():
    ag = small_agent()
    b = random_batch(4, 3, 2, terminal=np.ones(4, dtype=bool))
    _, _, _, info = critic_loss(b, ag, np.zeros((4, 2)), mode="episodic")
    np.testing.assert_array_equal(info.target, b.rew)


def test_critic_gradient_is_semi_gradient():
    ag = small_agent()
    b = random_batch(6, 3, 2)
    noise = np.random.default_rng(2).normal(size=(6, 2))

    def loss_q1(theta):
        ag.q1 = ag.q1.with_flat(theta)
        loss, g1, _, _ = critic_loss(b, ag, noise)
        return loss, g1

    assert grad_check(loss_q1, ag.q1.flat.copy()).max_rel_error < 1e-4

    # perturbing the targets changes the loss but the gradient has no target term
    base, g1, _, info = critic_loss(b, ag, noise)
    ag.q1_targ = ag.q1_targ.with_flat(ag.q1_targ.flat + 0.1)
    ag.q2_targ = ag.q2_targ.with_flat(ag.q2_targ.flat + 0.1)
    moved, g1b, _, info2 = critic_loss(b, ag, noise)
    assert moved != base
    sa = np.concatenate([b.obs, b.act], axis=1)
    from csac.approx import forward_cache, mlp_backward
    out, cache = forward_cache(ag.q1, sa)
    expect, _ = mlp_backward(ag.q1, cache, (out[:, 0] - info2.target)[:, None] / 6)
    np.testing.assert_allclose(g1b, expect, atol=1e-14)


def test_empty_batch_is_signalled():
    ag = small_agent()
    with pytest.raises(EmptyBuffer):
        critic_loss(random_batch(0, 3, 2), ag, np.zeros((0, 2)))
    with pytest.raises(EmptyBuffer):
        ReplayBuffer(3, 2, 10).sample(np.random.default_rng(0), 4)


# -- actor ---------------------------------------------------------------------------


def constant_q(obs_dim, act_dim, value=2.0):
    q = zeros_like_mlp(init_mlp((obs_dim + act_dim, 4, 1), np.random.default_rng(0)))
    flat = q.flat.copy()
    flat[-1] = value  # output bias
    return q.with_flat(flat)


def test_flat_q_without_entropy_gives_zero_gradient():
    ag = small_agent()
    q = constant_q(3, 2)
    obs = np.random.default_rng(0).normal(size=(5, 3))
    obj, grad, _ = actor_objective(ag.policy, q, q, obs, np.zeros((5, 2)), 2, 1.0, 0.0)
    assert obj == pytest.approx(2.0)
    assert not grad.any()


def test_policy_gradient_matches_finite_differences():
    ag = small_agent()
    obs = np.random.default_rng(0).normal(size=(6, 3))
    noise = np.random.default_rng(1).normal(size=(6, 2))

    def f(theta):
        ag.policy = ag.policy.with_flat(theta)
        obj, g, _ = policy_objective(obs, ag, noise)
        return obj, g

    assert grad_check(f, ag.policy.flat.copy()).max_rel_error < 1e-4


def abs_value_critic():
    """Q(s, a) = -|a| for 1-D s and a, built exactly from two ReLUs."""
    q = zeros_like_mlp(init_mlp((2, 2, 1), np.random.default_rng(0)))
    (w1, _), (w2, _) = q.layers
    w1[1] = [1.0, -1.0]
    w2[:, 0] = [-1.0, -1.0]
    return q


def test_peaked_q_pulls_mean_to_zero():
    """A critic maximized at a = 0 and no entropy term: ascent drives mu to 0."""
    q = abs_value_critic()
    assert q.layers[0][0][1, 0] == 1.0
    policy = zeros_like_mlp(init_mlp((1, 2), np.random.default_rng(0)))
    policy.layers[0][1][:] = [1.5, -4.0]  # mu = 1.5, log std = -4
    obs = np.zeros((16, 1))
    rng = np.random.default_rng(0)
    start = None
    for _ in range(300):
        obj, grad, info = actor_objective(policy, q, q, obs, rng.normal(size=(16, 1)), 1, 1.0, 0.0)
        start = obj if start is None else start
        policy = policy.with_flat(policy.flat + 0.05 * grad)
    mu = policy.layers[0][1][0]
    assert abs(mu) < 0.1
    assert obj > start


def test_entropy_only_ascent_raises_entropy():
    ag = small_agent(obs_dim=2, act_dim=1, seed=5)
    q = constant_q(2, 1, 0.0)
    obs = np.random.default_rng(0).normal(size=(64, 2))
    rng = np.random.default_rng(1)
    ent0 = None
    theta = ag.policy.flat.copy()
    for _ in range(100):
        p = ag.policy.with_flat(theta)
        obj, grad, info = actor_objective(p, q, q, obs, rng.normal(size=(64, 1)), 1, 1.0, 0.2)
        if ent0 is None:
            ent0 = -info.logp.mean()
        theta = theta + 0.01 * grad
    _, _, info = actor_objective(ag.policy.with_flat(theta), q, q, obs, rng.normal(size=(64, 1)), 1, 1.0, 0.2)
    assert -info.logp.mean() > ent0


# -- temperature ---------------------------------------------------------------------


def test_temperature_examples():
    J, d_alpha, d_log = temperature_objective(np.array([-1.0, -3.0]), 0.0, -2.0)
    assert d_alpha == 4.0
    assert J == 4.0 and d_log == 4.0
    _, d0, _ = temperature_objective(np.array([2.0, 2.0]), 0.3, -2.0)
    assert d0 == 0.0


def test_low_entropy_raises_alpha():
    ag = small_agent(act_dim=1, warmup_steps=1)
    # log pi far above -target: entropy below target, so alpha must grow
    _, _, g = temperature_objective(np.full(8, 3.0), float(ag.log_alpha[0]), ag.target_entropy)
    assert g < 0  # descent on J raises log alpha


# -- transitions and buffer ----------------------------------------------------------


def test_reset_rewriting():
    t = rewrite_reset_transition(np.ones(2), np.zeros(1), -499.4, np.full(2, 7.0))
    assert t.terminal is None and np.all(t.next_state == 7.0) and t.reward == -499.4
    with pytest.raises(ContractViolation):
        rewrite_reset_transition(np.ones(2), np.zeros(1), 0.0, np.ones(2), mode="episodic")


def test_transition_kinds():
    s, a, nxt, post = np.zeros(2), np.zeros(1), np.ones(2), np.full(2, 5.0)
    state_out = StepOutcome(nxt, -10.0, 0.0, ResetEvent.STATE_BASED, post)
    time_out = StepOutcome(nxt, 0.0, 0.0, ResetEvent.TIME_BASED, post)
    c_state = make_transition(s, a, state_out, -10.0, "continuing")
    assert c_state.terminal is None and np.array_equal(c_state.next_state, post)
    c_time = make_transition(s, a, time_out, 0.0, "continuing")
    assert c_time.terminal is None and np.array_equal(c_time.next_state, post)
    e_state = make_transition(s, a, state_out, -10.0, "episodic")
    assert e_state.terminal is True and np.array_equal(e_state.next_state, nxt)
    e_time = make_transition(s, a, time_out, 0.0, "episodic")
    assert e_time.terminal is False and np.array_equal(e_time.next_state, nxt)


def test_buffer_rejects_wrong_flags():
    with pytest.raises(ContractViolation):
        ReplayBuffer(1, 1, 4).add(Transition(np.zeros(1), np.zeros(1), 0.0, np.zeros(1), False))
    with pytest.raises(ContractViolation):
        ReplayBuffer(1, 1, 4, episodic=True).add(Transition(np.zeros(1), np.zeros(1), 0.0, np.zeros(1)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(0, 60))
def test_buffer_fifo_eviction(capacity, n):
    buf = ReplayBuffer(1, 1, capacity)
    for i in range(n):
        buf.add(Transition(np.array([i]), np.zeros(1), float(i), np.zeros(1)))
    assert len(buf) == min(n, capacity)
    if n:
        stored = sorted(buf.get(i).reward for i in range(len(buf)))
        assert stored == [float(i) for i in range(max(0, n - capacity), n)]
        assert buf.get(buf.oldest_index()).reward == float(max(0, n - capacity))


def test_buffer_sampling_is_uniform():
    buf = ReplayBuffer(1, 1, 50)
    for i in range(70):
        buf.add(Transition(np.array([i]), np.zeros(1), 0.0, np.zeros(1)))
    idx = buf.sample_indices(np.random.default_rng(0), 50_000)
    counts = np.bincount(idx, minlength=50)
    from scipy.stats import chisquare
    assert chisquare(counts).pvalue > 1e-3
    assert idx.max() < 50


def test_buffer_pickle_roundtrip():
    import pickle
    buf = ReplayBuffer(2, 1, 1000)
    for i in range(5):
        buf.add(Transition(np.full(2, i), np.zeros(1), float(i), np.ones(2)))
    blob = pickle.dumps(buf)
    assert len(blob) < 4000
    back = pickle.loads(blob)
    assert back.capacity == 1000 and len(back) == 5 and back.get(4).reward == 4.0
    assert back.obs.shape == (1000, 2)


# -- training loop -------------------------------------------------------------------


def test_polyak_paper_example():
    z = zeros_like_mlp(init_mlp((1, 1), np.random.default_rng(0)))
    one = z.with_flat(np.ones_like(z.flat))
    assert np.allclose(polyak_update(z, one, 0.005).flat, 0.005)


def test_warmup_changes_no_parameters():
    env = make_env(EnvConfig("pendulum"), np.random.default_rng(0))
    ag = small_agent(3, 1, warmup_steps=20)
    before = ag.policy.flat.copy(), ag.q1.flat.copy(), ag.log_alpha.copy()
    buf, st_ = ReplayBuffer(3, 1, 100), streams()
    obs = env.observation()
    for _ in range(19):
        obs, rec = train_step(ag, env, buf, obs, st_)
        assert rec.update is None
    assert len(buf) == 19
    assert np.array_equal(ag.policy.flat, before[0]) and np.array_equal(ag.q1.flat, before[1])
    assert np.array_equal(ag.log_alpha, before[2])


def test_one_update_moves_every_group_once():
    env = make_env(EnvConfig("pendulum"), np.random.default_rng(0))
    ag = small_agent(3, 1, warmup_steps=1)
    buf, st_ = ReplayBuffer(3, 1, 100), streams()
    obs, rec = train_step(ag, env, buf, env.observation(), st_)
    assert len(buf) == 1 and rec.update is not None
    assert [o.step for o in (ag.opt_policy, ag.opt_q1, ag.opt_q2, ag.opt_alpha)] == [1, 1, 1, 1]


def test_rbar_is_updated_before_the_critic_uses_it():
    env = make_env(EnvConfig("pendulum"), np.random.default_rng(0))
    ag = small_agent(3, 1, warmup_steps=1, alpha_rbar=0.5)
    buf, st_ = ReplayBuffer(3, 1, 100), streams()
    _, rec = train_step(ag, env, buf, env.observation(), st_)
    assert ag.rbar == 0.5 * rec.learning_reward


def test_update_uses_step_start_parameters():
    """Polyak blends the critics from before this step's critic update."""
    ag = small_agent(warmup_steps=1)
    buf = ReplayBuffer(3, 2, 100)
    rng = np.random.default_rng(0)
    for _ in range(20):
        buf.add(Transition(rng.normal(size=3), rng.uniform(-1, 1, 2), float(rng.normal()), rng.normal(size=3)))
    q1_old, targ_old = ag.q1.flat.copy(), ag.q1_targ.flat.copy()
    sac_update(ag, buf, np.random.default_rng(1))
    np.testing.assert_allclose(ag.q1_targ.flat, 0.995 * targ_old + 0.005 * q1_old, rtol=0, atol=1e-15)
    assert not np.array_equal(ag.q1.flat, q1_old)


def test_alpha_stays_positive():
    env = make_env(EnvConfig("pendulum"), np.random.default_rng(0))
    ag = small_agent(3, 1, warmup_steps=5, lr_alpha=0.05)
    buf, st_ = ReplayBuffer(3, 1, 500), streams()
    obs = env.observation()
    for _ in range(200):
        obs, _ = train_step(ag, env, buf, obs, st_)
        assert ag.alpha > 0 and math.isfinite(ag.rbar)


def test_divergence_is_reported():
    ag = small_agent(warmup_steps=1)
    buf = ReplayBuffer(3, 2, 10)
    buf.add(Transition(np.zeros(3), np.zeros(2), float("nan"), np.zeros(3)))
    with pytest.raises(NumericDivergence) as err:
        sac_update(ag, buf, np.random.default_rng(0))
    assert "critic_loss" in err.value.dump


def test_training_is_deterministic():
    def run():
        env = make_env(EnvConfig("pendulum"), np.random.default_rng(0))
        ag = small_agent(3, 1, warmup_steps=50)
        buf, st_ = ReplayBuffer(3, 1, 2000), streams()
        obs, out = env.observation(), []
        for _ in range(1000):
            obs, rec = train_step(ag, env, buf, obs, st_)
            out.append((rec.learning_reward, *rec.action))
        return np.array(out), ag.policy.flat

    (a, pa), (b, pb) = run(), run()
    assert np.array_equal(a, b) and np.array_equal(pa, pb)


def test_act_returns_bounded_actions():
    ag = small_agent()
    a = act(ag, np.zeros(3), np.random.default_rng(0))
    assert a.shape == (2,) and np.all(np.abs(a) < 1)
