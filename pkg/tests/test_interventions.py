import hashlib
import itertools
import math
import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from csac.agent import AgentConfig, ReplayBuffer, Streams, Transition, init_agent, policy_objective, train_step
from csac.approx import grad_check, mlp_forward
from csac.envs import EnvConfig, make_env
from csac.interventions import (
    InterventionConfig,
    InterventionRngs,
    Interventions,
    NetworkResetState,
    RunningMoments,
    ToggleState,
    action_penalty_policy,
    action_penalty_reward,
    entropy_only_objective,
    fixed_dist_override,
    init_rnd,
    network_reset,
    q_probe_mode,
    q_spread,
    rnd_intrinsic,
    rnd_loss,
    rnd_raw_intrinsic,
    rnd_update,
    scaled_policy_objective,
    signed_alpha,
    toggle_decide,
    toggle_observe,
    update_qscale,
)


def small_agent(obs_dim=3, act_dim=2, seed=0, **kw):
    cfg = AgentConfig(hidden=(8, 8), batch_size=16, warmup_steps=kw.pop("warmup_steps", 10), **kw)
    return init_agent(cfg, obs_dim, act_dim, np.random.default_rng(seed))


def rngs(seed=0):
    return InterventionRngs(*(np.random.default_rng(seed + i) for i in range(4)))


def digest(p) -> str:
    return hashlib.sha256(p.flat.tobytes()).hexdigest()


# -- toggle ---------------------------------------------------------------------------


def feed(toggle, means):
    for m in means:
        for _ in range(toggle.period):
            toggle_observe(toggle, m)
    return toggle


def test_toggle_defaults_before_two_periods():
    t = ToggleState(period=10)
    assert toggle_decide(t, 0.3) == (0.3, 1e-3)
    feed(t, [5.0])
    assert toggle_decide(t, 0.3) == (0.3, 1e-3)


def test_toggle_tie_and_improvement():
    tie = feed(ToggleState(period=10), [1.0, 1.0])
    assert toggle_decide(tie, 0.3) == (0.02, 0.0)
    up = feed(ToggleState(period=10), [1.0, 2.0])
    assert toggle_decide(up, 0.3) == (0.3, 0.001)
    down = feed(ToggleState(period=10), [2.0, 1.0])
    assert toggle_decide(down, 0.3) == (0.02, 0.0)


def test_toggle_constant_within_period():
    t = feed(ToggleState(period=10), [2.0, 1.0])
    decisions = set()
    for r in [100.0] * 9:
        toggle_observe(t, r)
        decisions.add(toggle_decide(t, 0.5))
    assert decisions == {(0.02, 0.0)}
    toggle_observe(t, 100.0)
    assert toggle_decide(t, 0.5) == (0.5, 1e-3)


@pytest.mark.parametrize("seq", list(itertools.product([0.0, 0.5, 1.0], repeat=3)))
def test_toggle_depends_on_last_two_periods(seq):
    t = feed(ToggleState(period=4), seq)
    expect = (0.02, 0.0) if seq[-1] <= seq[-2] else (0.7, 1e-3)
    assert toggle_decide(t, 0.7) == expect


# -- Q scale --------------------------------------------------------------------------


def test_qscale_examples():
    assert update_qscale(1.0, np.full(256, 3.0)) == 1.0
    grid = np.arange(256.0)
    # linear interpolation between order statistics: P_k = k/100 * (n - 1)
    p5, p95 = 0.05 * 255, 0.95 * 255
    assert q_spread(grid) == pytest.approx(p95 - p5, abs=1e-12)
    assert update_qscale(1.0, grid) == pytest.approx(0.99 + 0.01 * (p95 - p5), abs=1e-12)


def test_qscale_converges_to_spread():
    eta, d = 1.0, 7.0
    q = np.concatenate([np.zeros(128), np.full(128, d)])
    for k in range(1, 200):
        eta = update_qscale(eta, q)
        assert eta == pytest.approx(d + (1 - d) * 0.99**k, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(arrays(np.float64, 16, elements=st.floats(-1e3, 1e3)), min_size=1, max_size=30))
def test_qscale_never_below_one(batches):
    eta = 1.0
    for q in batches:
        eta = update_qscale(eta, q)
        assert eta >= 1.0 - 1e-12


def test_scaled_objective_reduces_to_plain():
    ag = small_agent(act_dim=1)
    obs = np.random.default_rng(0).normal(size=(8, 3))
    noise = np.random.default_rng(1).normal(size=(8, 1))
    t = ToggleState()
    plain, gp, _ = policy_objective(obs, ag, noise)
    scaled, gs, _ = scaled_policy_objective(obs, ag, t, noise, update_scale=False)
    assert scaled == plain
    np.testing.assert_array_equal(gs, gp)


def test_scaled_objective_uses_fixed_alpha_when_active():
    ag = small_agent()
    ag.log_alpha[0] = math.log(0.7)
    obs = np.random.default_rng(0).normal(size=(8, 3))
    noise = np.random.default_rng(1).normal(size=(8, 2))
    t = feed(ToggleState(period=2), [1.0, 0.0])
    assert t.active
    obj, _, info = scaled_policy_objective(obs, ag, t, noise, update_scale=False)
    assert obj == pytest.approx(info.q_min.mean() - 0.02 / 2 * info.logp.mean(), abs=1e-12)


def test_scaled_objective_direction_is_scale_invariant():
    """Doubling Q with a converged doubled eta leaves the gradient direction alone."""
    ag = small_agent(act_dim=1)
    obs = np.random.default_rng(0).normal(size=(8, 3))
    noise = np.random.default_rng(1).normal(size=(8, 1))
    t1, t2 = ToggleState(eta_q=3.0), ToggleState(eta_q=6.0)
    _, g1, _ = scaled_policy_objective(obs, ag, t1, noise, update_scale=False)
    doubled = small_agent(act_dim=1)
    for name in ("q1", "q2"):
        q = getattr(ag, name)
        flat = q.flat.copy()
        (w, b) = q.layers[-1]
        n_out = w.size + b.size
        flat[-n_out:] *= 2.0  # last linear layer doubles the output
        setattr(doubled, name, q.with_flat(flat))
    doubled.policy = ag.policy
    doubled.log_alpha = ag.log_alpha
    _, g2, _ = scaled_policy_objective(obs, doubled, t2, noise, update_scale=False)
    np.testing.assert_allclose(g1, g2, atol=1e-12)


def test_scaled_objective_gradient():
    ag = small_agent()
    obs = np.random.default_rng(0).normal(size=(6, 3))
    noise = np.random.default_rng(1).normal(size=(6, 2))
    t = ToggleState(eta_q=2.5)

    def f(theta):
        ag.policy = ag.policy.with_flat(theta)
        obj, g, _ = scaled_policy_objective(obs, ag, t, noise, update_scale=False)
        return obj, g

    assert grad_check(f, ag.policy.flat.copy()).max_rel_error < 1e-4


# -- action penalties -------------------------------------------------------------------


def test_reward_penalty_examples():
    assert action_penalty_reward(1.5, np.zeros(2), 1.0) == 1.5
    assert action_penalty_reward(1.5, np.ones(2), 1.0) == pytest.approx(-0.5)
    assert action_penalty_reward(0.0, np.array([0.5]), 1e-5) == pytest.approx(-2.5e-6, abs=1e-18)


def test_policy_penalty_examples():
    assert action_penalty_policy(3.0, np.zeros((4, 2)), 0.1)[0] == 3.0
    unit = np.array([[1.0, 0.0], [0.0, -1.0], [0.6, 0.8]])
    assert action_penalty_policy(3.0, unit, 0.1)[0] == pytest.approx(2.9)


def test_policy_penalty_gradient():
    a0 = np.random.default_rng(0).uniform(-1, 1, (5, 2))

    def f(flat):
        obj, g = action_penalty_policy(0.0, flat.reshape(5, 2), 0.3)
        return obj, g.reshape(-1)

    rep = grad_check(f, a0.reshape(-1))
    assert rep.max_rel_error < 1e-4
    g = action_penalty_policy(0.0, a0, 0.3)[1]
    np.testing.assert_allclose(g, -0.3 / 5 * a0 / np.linalg.norm(a0, axis=1, keepdims=True))


# -- entropy-only objective ----------------------------------------------------------------


def test_signed_alpha_convention():
    assert signed_alpha(0.3, np.array([2.0, 2.0]), -2.0) == 0.3  # boundary counts as +1
    assert signed_alpha(0.3, np.array([5.0]), -2.0) == 0.3
    assert signed_alpha(0.3, np.array([-5.0]), -2.0) == -0.3


def test_entropy_only_has_no_q_term():
    ag = small_agent()
    obs = np.random.default_rng(0).normal(size=(8, 3))
    noise = np.random.default_rng(1).normal(size=(8, 2))
    obj, _, info = entropy_only_objective(obs, ag, noise, target_entropy=1.34)
    a_s = signed_alpha(ag.alpha, info.logp, 1.34)
    assert obj == pytest.approx(-a_s * info.logp.mean(), abs=1e-12)


def test_entropy_only_gradient():
    ag = small_agent()
    obs = np.random.default_rng(0).normal(size=(6, 3))
    noise = np.random.default_rng(1).normal(size=(6, 2))

    def f(theta):
        ag.policy = ag.policy.with_flat(theta)
        obj, g, _ = entropy_only_objective(obs, ag, noise, -2.0)
        return obj, g

    assert grad_check(f, ag.policy.flat.copy()).max_rel_error < 1e-4


@pytest.mark.parametrize("target", [-2.0, 1.34])
def test_entropy_only_runs_on_reacher(target):
    hooks_cfg = InterventionConfig(entropy_only=True, entropy_only_target=target)
    run_short("reacher", hooks_cfg, steps=300)


# -- fixed distribution and probes -----------------------------------------------------------------


def test_fixed_dist_examples():
    tight = fixed_dist_override(0.0, 1e-9)
    a = tight(np.random.default_rng(0), 3)
    assert np.all(np.abs(a) < 1e-8)
    with pytest.raises(ValueError):
        fixed_dist_override(0.0, 0.0)
    s = pickle.loads(pickle.dumps(fixed_dist_override(2.0, 0.3)))
    assert s.mu == 2.0 and s.sigma == 0.3


def test_fixed_dist_drives_arm_to_joint_limit():
    env = make_env(EnvConfig("reacher"), np.random.default_rng(0))
    sampler = fixed_dist_override(2.0, 0.1)
    rng = np.random.default_rng(1)
    for _ in range(3000):
        env.step(sampler(rng, 2))
    assert env.state.q[0] == pytest.approx(env.p.joint_limit)


def test_fixed_dist_ignores_policy_but_learning_continues():
    cfg = InterventionConfig(fixed_mu=0.5, fixed_sigma=0.2)
    ag, hooks, recs = run_short("pendulum", cfg, steps=60, warmup=20)
    expected = np.tanh(np.random.default_rng(7).normal(0.5, 0.2, size=(60, 1)))
    np.testing.assert_array_equal(np.array([r.action for r in recs]), expected)
    assert ag.opt_policy.step == 41


def test_fixed_probe_keeps_critic_frozen():
    cfg = InterventionConfig(q_probe="fixed", policy_entropy=False)
    ag0 = small_agent(3, 1, warmup_steps=5)
    before = digest(ag0.q1), digest(ag0.q1_targ)
    ag, _, _ = run_short("pendulum", cfg, steps=100, warmup=5)
    assert (digest(ag.q1), digest(ag.q1_targ)) == before


def test_reinit_probe_changes_critic_every_step():
    cfg = InterventionConfig(q_probe="reinit_every_step", policy_entropy=False)
    seen = set()
    ag = small_agent(3, 1, warmup_steps=2)
    env = make_env(EnvConfig("pendulum"), np.random.default_rng(0))
    hooks = Interventions(cfg, ag, rngs())
    buf, streams = ReplayBuffer(3, 1, 1000), Streams(np.random.default_rng(7), np.random.default_rng(8))
    obs = env.observation()
    for _ in range(30):
        obs, _ = train_step(ag, env, buf, obs, streams, hooks)
        seen.add(digest(ag.q1))
    assert len(seen) == 30 - 1 + 1  # one fresh critic per update plus the initial one
    with pytest.raises(ValueError):
        q_probe_mode("sometimes", np.random.default_rng(0))


# -- network resets -------------------------------------------------------------------------------


def test_plain_reset_keeps_alpha_and_buffer():
    ag = small_agent()
    ag.log_alpha[0] = -1.3
    old = digest(ag.policy), digest(ag.q1)
    network_reset(ag, NetworkResetState("plain"), np.random.default_rng(5))
    assert ag.log_alpha[0] == -1.3
    assert digest(ag.policy) != old[0] and digest(ag.q1) != old[1]
    assert np.array_equal(ag.q1.flat, ag.q1_targ.flat)
    assert ag.opt_policy.step == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_reset_variants_draw_in_range(seed):
    ag = small_agent()
    state = NetworkResetState("reset_alpha")
    network_reset(ag, state, np.random.default_rng(seed))
    assert 0.01 <= ag.alpha <= 1.0 and state.alpha_frozen
    network_reset(ag, NetworkResetState("reset_entropy"), np.random.default_rng(seed))
    assert -2.0 <= ag.target_entropy <= 1.35


def test_periodic_reset_fires_on_schedule_and_freezes_alpha():
    cfg = InterventionConfig(net_reset="reset_alpha", net_reset_period=25)
    ag, hooks, _ = run_short("pendulum", cfg, steps=60, warmup=5)
    assert hooks.reset_state.resets == 2
    assert hooks.alpha_lr(ag) == 0.0


# -- RND -----------------------------------------------------------------------------------------


def tiny_rnd(obs_dim=3, seed=0, **kw):
    return init_rnd(obs_dim, np.random.default_rng(seed), predictor_hidden=(8,) * 4,
                    target_hidden=(8,) * 2, out_dim=4, **kw)


def test_rnd_matching_networks_give_zero_reward():
    rnd = tiny_rnd()
    rnd.predictor = rnd.target
    s = np.random.default_rng(0).normal(size=(5, 3))
    rnd.obs_moments.update(s)
    assert np.all(rnd_raw_intrinsic(rnd, s) == 0.0)


def test_rnd_zero_masks_give_zero_loss():
    rnd = tiny_rnd()
    s = np.random.default_rng(0).normal(size=(6, 3))
    loss, grad = rnd_loss(rnd, s, np.zeros(6))
    assert loss == 0.0 and not grad.any()


def test_rnd_masked_loss_matches_recomputation():
    rnd = tiny_rnd()
    s = np.random.default_rng(0).normal(size=(256, 3))
    rnd.obs_moments.update(s)
    masks = (np.random.default_rng(1).random(256) < 0.25).astype(float)
    loss, _ = rnd_loss(rnd, s, masks)
    x = rnd.obs_moments.normalize(s, clip=5.0)
    d = mlp_forward(rnd.predictor, x) - mlp_forward(rnd.target, x)
    per = (d * d).sum(axis=1) / 3
    assert loss == pytest.approx(per[masks == 1].mean(), abs=1e-12)
    full, _ = rnd_loss(rnd, s, np.ones(256))
    assert full == pytest.approx(per.mean(), abs=1e-12)


def test_rnd_loss_gradient_and_masked_rows():
    rnd = tiny_rnd()
    s = np.random.default_rng(0).normal(size=(6, 3))
    masks = np.array([1.0, 0, 1, 0, 0, 1])

    def f(theta):
        rnd.predictor = rnd.predictor.with_flat(theta)
        return rnd_loss(rnd, s, masks)

    assert grad_check(f, rnd.predictor.flat.copy()).max_rel_error < 1e-4
    # masked-out samples carry no gradient
    _, g_all = rnd_loss(rnd, s, masks)
    _, g_sub = rnd_loss(rnd, s[masks == 1], np.ones(3))
    np.testing.assert_allclose(g_all, g_sub, atol=1e-14)


def test_rnd_training_fits_target():
    rnd = tiny_rnd(p_upd=1.0, lr=1e-3)
    s = np.random.default_rng(0).normal(size=(32, 3))
    rnd.obs_moments.update(s)
    target_before = rnd.target.flat.copy()
    raw = [rnd_raw_intrinsic(rnd, s).mean()]
    for _ in range(30):
        rnd_update(rnd, s, np.random.default_rng(0))
        raw.append(rnd_raw_intrinsic(rnd, s).mean())
    assert all(b < a for a, b in zip(raw, raw[1:]))
    assert np.array_equal(rnd.target.flat, target_before)


def test_rnd_zero_coefficient_is_plain_sac():
    cfg_off = InterventionConfig()
    cfg_rnd = InterventionConfig(rnd=True, rnd_c_int=0.0, rnd_predictor_hidden=(8,) * 4,
                                 rnd_target_hidden=(8,) * 2, rnd_out=4)
    a, _, ra = run_short("pendulum", cfg_off, steps=50, warmup=10)
    b, hooks, rb = run_short("pendulum", cfg_rnd, steps=50, warmup=10)
    assert np.array_equal(a.q1.flat, b.q1.flat) and np.array_equal(a.policy.flat, b.policy.flat)
    assert math.isfinite(hooks.last_rnd_loss)


def test_rnd_intrinsic_is_normalized():
    rnd = tiny_rnd()
    s = np.random.default_rng(0).normal(size=(512, 3))
    rnd.obs_moments.update(s)
    r = rnd_intrinsic(rnd, s)
    assert abs(r.mean()) < 1e-9 and r.std() == pytest.approx(1.0, rel=1e-4)


# -- running moments ------------------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (40, 2), elements=st.floats(-100, 100)), st.integers(1, 39))
def test_moments_merge_order_invariant(x, cut):
    whole = RunningMoments((2,)).update(x)
    split = RunningMoments((2,)).update(x[:cut]).update(x[cut:])
    rev = RunningMoments((2,)).update(x[cut:]).update(x[:cut])
    for m in (split, rev):
        np.testing.assert_allclose(m.mean, whole.mean, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(m.var, whole.var, rtol=1e-7, atol=1e-7)
        assert np.all(m.var >= 0)


def test_moments_normalize_stream():
    x = np.random.default_rng(0).normal(3.0, 5.0, size=(20_000, 2))
    m = RunningMoments((2,))
    for chunk in np.array_split(x, 100):
        m.update(chunk)
    y = m.normalize(x)
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-6)


# -- full hook object ------------------------------------------------------------------------------


def run_short(task, cfg: InterventionConfig, steps=100, warmup=10):
    env = make_env(EnvConfig(task), np.random.default_rng(0))
    ag = small_agent(env.obs_dim, env.act_dim, warmup_steps=warmup)
    hooks = Interventions(cfg, ag, rngs())
    buf = ReplayBuffer(env.obs_dim, env.act_dim, 10_000)
    streams = Streams(np.random.default_rng(7), np.random.default_rng(8))
    obs, recs = env.observation(), []
    for _ in range(steps):
        obs, rec = train_step(ag, env, buf, obs, streams, hooks)
        recs.append(rec)
    return ag, hooks, recs


def test_toggle_run_keeps_eta_and_pauses_alpha():
    cfg = InterventionConfig(alpha_toggle=True, toggle_period=10)
    ag, hooks, _ = run_short("pendulum", cfg, steps=200, warmup=10)
    assert hooks.toggle.periods == 19
    assert hooks.toggle.eta_q >= 1.0


def test_reward_penalty_changes_learning_reward_only():
    cfg = InterventionConfig(reward_penalty=0.5)
    _, _, recs = run_short("pendulum", cfg, steps=30)
    for r in recs:
        expect = r.outcome.reward_modified - 0.5 * float(r.action @ r.action)
        assert r.learning_reward == pytest.approx(expect, abs=1e-15)


def test_toggle_without_entropy_is_rejected():
    with pytest.raises(ValueError):
        run_short("pendulum", InterventionConfig(alpha_toggle=True, policy_entropy=False), steps=20)


def test_config_validation():
    with pytest.raises(ValueError):
        InterventionConfig(fixed_mu=0.0)
    with pytest.raises(ValueError):
        InterventionConfig(fixed_mu=0.0, fixed_sigma=-1.0)
    with pytest.raises(ValueError):
        InterventionConfig(net_reset="weekly")
    with pytest.raises(ValueError):
        InterventionConfig(reward_penalty=-1.0)
