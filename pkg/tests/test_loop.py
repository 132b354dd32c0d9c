import math

import numpy as np
import pytest

from worldenv import envcore, loop, netlib, reflector, worldsim
from worldenv import policy as pol
from worldenv.errors import ConfigurationError
from worldenv.loop import RlConfig, RolloutStats


def _exact_model(W, o, s_next):
    """Ground-truth observation update written from the frame alone (no environment calls)."""
    x_new, p_old, p_new = s_next[:, 0:3], o[:, 6], s_next[:, 6]
    held = o[:, envcore.OBS_HELD] > 0.5
    obj = o[:, envcore.OBS_OBJECT]
    goal = o[:, 13:16] + obj
    obj = np.where(held[:, None], x_new, obj)
    released = held & (p_new > 0.5)
    grasped = ~held & (p_old >= 0.5) & (p_new < 0.5) & (np.linalg.norm(x_new - obj, axis=-1) < 0.05)
    obj = np.where(grasped[:, None], x_new, obj)
    held_new = (held & ~released) | grasped
    return np.concatenate([s_next, obj, obj - x_new, goal - obj, held_new[:, None].astype(float)], axis=-1)


def _with_scale_bias(params, bias):
    data = params.scale.data.copy()
    W_out, b_out = params.scale.spec.unflatten(data)[-1]
    W_out[...] = 0.0
    b_out[...] = bias
    return pol.PolicyParams(params.trunk, params.action, params.scale.with_data(data))


def _constant_reflector(logit):
    Rp = reflector.init_reflector(0, hidden=8)
    data = np.zeros_like(Rp.data)
    Rp.spec.unflatten(data)[-1][1][...] = logit
    return Rp.with_data(data)


@pytest.fixture(scope="module")
def models():
    theta = pol.init_policy(0, hidden=16, head_hidden=8)
    theta = _with_scale_bias(theta, -2.0)
    W = worldsim.init_worldsim(0, hidden=16)
    Rp = reflector.init_reflector(1, hidden=8)
    state, obs, g = envcore.reset_batch([0, 1, 2], [0, 1, 2])
    contexts = [loop.Context(g[i], obs[i], state.proprio[i]) for i in range(3)]
    return theta, W, Rp, contexts


CFG = RlConfig(n_rollouts=4, horizon=12, buffer_size=8, iterations=2)


# closed forms -------------------------------------------------------------------

def test_rloo_two_rewards():
    b, A = loop.rloo_advantages([1.0, 0.0])
    assert np.allclose(b, [0.0, 1.0], atol=1e-12) and np.allclose(A, [1.0, -1.0], atol=1e-12)


def test_rloo_three_rewards():
    _, A = loop.rloo_advantages([0.9, 0.1, 0.5])
    assert np.allclose(A, [0.6, -0.6, 0.0], atol=1e-12)


def test_rloo_equal_rewards_give_zero():
    _, A = loop.rloo_advantages([0.4] * 8)
    assert np.all(A == 0.0)


def test_rloo_needs_two_rewards():
    with pytest.raises(ConfigurationError):
        loop.rloo_advantages([1.0])


def test_rloo_properties_random():
    rng = np.random.default_rng(0)
    for n in (2, 3, 8):
        for _ in range(300):
            R = rng.random(n)
            b, A = loop.rloo_advantages(R)
            assert abs(A.sum()) <= 1e-12 * n
            for i in range(n):
                others = [R[j] for j in reversed(range(n)) if j != i]
                assert abs(b[i] - math.fsum(others) / (n - 1)) <= 1e-12


def test_importance_ratio_examples():
    assert loop.importance_ratio(-1.3, -1.3) == 1.0
    assert abs(loop.importance_ratio(math.log(2.0), 0.0) - 2.0) < 1e-12
    assert loop.importance_ratio(50.0, 0.0) == math.exp(20.0)
    assert loop.importance_ratio(-50.0, 0.0) == math.exp(-20.0)


def test_clipped_objective_examples():
    obj, _ = loop.clipped_objective([1.0, 1.3, 0.5], [0.7, 1.0, -1.0], 0.1)
    assert np.allclose(-obj, [-0.7, -1.1, 0.9], atol=1e-12)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        RlConfig(n_rollouts=1, buffer_size=4)
    with pytest.raises(ConfigurationError):
        RlConfig(clip_eps=1.0)
    with pytest.raises(ConfigurationError):
        RlConfig(n_rollouts=8, buffer_size=12)


# rollouts -----------------------------------------------------------------------

def test_rollouts_are_grouped_and_consistent(models):
    theta, W, Rp, contexts = models
    groups = loop.collect_rollouts(theta, W, Rp, contexts, CFG, seed=0)
    assert len(groups) == 3
    for grp in groups:
        assert len(grp.trajectories) == 4
        assert abs(grp.advantages.sum()) <= 1e-12 * 4
        for tr in grp.trajectories:
            assert tr.length == tr.reward_trace.t_end
            assert np.all(np.isfinite(tr.behavior_logp))
            assert np.all(np.diff(tr.reward_trace.scores) >= 0)
            # stored behaviour log-probs are those of the executed actions
            lp = pol.logprob(theta, tr.obs, tr.proprio, tr.goal_enc, tr.actions)
            assert np.allclose(lp, tr.behavior_logp, rtol=0, atol=1e-12)
            assert np.array_equal(tr.proprio[1:], envcore.fk(tr.proprio[:-1], tr.actions[:-1]))


def test_rollouts_are_deterministic(models):
    theta, W, Rp, contexts = models
    a = loop.collect_rollouts(theta, W, Rp, contexts, CFG, seed=5)
    b = loop.collect_rollouts(theta, W, Rp, contexts, CFG, seed=5)
    for ga, gb in zip(a, b):
        for ta, tb in zip(ga.trajectories, gb.trajectories):
            assert np.array_equal(ta.actions, tb.actions) and ta.R == tb.R


def test_rollouts_make_no_environment_calls(models):
    theta, W, Rp, contexts = models
    with envcore.access_guard(forbid=False) as guard:
        loop.collect_rollouts(theta, W, Rp, contexts, CFG, seed=0)
        loop.train_iteration(theta, CFG, W, Rp, contexts, seed=0)
    assert guard.calls == 0


def test_constant_zero_reflector_never_terminates(models):
    theta, W, _, contexts = models
    groups = loop.collect_rollouts(theta, W, _constant_reflector(-60.0), contexts, CFG, seed=0)
    for grp in groups:
        for tr in grp.trajectories:
            assert tr.length == CFG.horizon and not tr.reward_trace.terminated


def test_minimum_scale_with_exact_model_shrinks_advantages(models, monkeypatch):
    theta, _, _, contexts = models
    expert = envcore.run_episodes(envcore.expert_policy, [0] * 4, range(4), 90)
    Rp = reflector.train_reflector(expert, reflector.ReflectorConfig(epochs=10))
    monkeypatch.setattr(worldsim, "predict_obs_unchecked", _exact_model)
    n_trunk, n_action, _ = theta.group_sizes()
    flat = theta.flat()
    flat[n_trunk : n_trunk + n_action] = 0.0
    still = theta.from_flat(flat)

    def spread(bias):
        groups = loop.collect_rollouts(_with_scale_bias(still, bias), None, Rp, contexts, RlConfig(horizon=30), seed=0)
        return max(np.abs(g.advantages).max() for g in groups)

    # the clamp makes any lower bias identical to the floor
    assert spread(-10.0) == spread(pol.BETA_MIN)
    # advantages scale with the action noise, which the floor cuts by e^4 relative to beta = -2
    assert spread(pol.BETA_MIN) < spread(-2.0) / 10.0


def test_non_finite_rollouts_are_regenerated_then_dropped(models, monkeypatch):
    theta, W, Rp, contexts = models
    monkeypatch.setattr(worldsim, "predict_obs_unchecked", lambda W, o, s: np.full_like(o, np.nan))
    stats = RolloutStats()
    groups = loop.collect_rollouts(theta, W, Rp, contexts, CFG, seed=0, stats=stats)
    assert groups == []
    assert stats.dropped_groups == 3 and stats.regenerated == 3 * 4 * CFG.max_retries


def test_transient_non_finite_rollouts_are_replaced(models, monkeypatch):
    theta, W, Rp, contexts = models
    real = worldsim.predict_obs_unchecked
    calls = {"n": 0}

    def flaky(W_, o, s):
        calls["n"] += 1
        out = real(W_, o, s)
        if calls["n"] == 1:
            out[0] = np.nan
        return out

    monkeypatch.setattr(worldsim, "predict_obs_unchecked", flaky)
    stats = RolloutStats()
    groups = loop.collect_rollouts(theta, W, Rp, contexts, CFG, seed=0, stats=stats)
    assert len(groups) == 3 and stats.regenerated == 1 and stats.dropped_groups == 0


# PPO ------------------------------------------------------------------------------

def _micro_buffer(models, seed=0):
    theta, W, Rp, contexts = models
    cfg = RlConfig(n_rollouts=3, horizon=6, buffer_size=3)
    groups = loop.collect_rollouts(theta, W, Rp, contexts[:1], cfg, seed=seed)
    rng = np.random.default_rng(seed)
    grp = groups[0]
    grp.advantages = rng.normal(size=3)
    return groups, cfg


def test_on_policy_loss_is_weighted_mean_advantage(models):
    groups, cfg = _micro_buffer(models)
    theta = models[0]
    loss, _ = loop.ppo_loss(groups, theta, cfg)
    trajs, A = groups[0].trajectories, groups[0].advantages
    lengths = np.array([tr.length for tr in trajs])
    assert abs(loss + np.sum(A * lengths) / lengths.sum()) < 1e-12


def test_on_policy_gradient_is_policy_gradient(models):
    groups, cfg = _micro_buffer(models)
    theta = models[0]
    _, g = loop.ppo_loss(groups, theta, cfg)
    trajs, A = groups[0].trajectories, groups[0].advantages
    total = sum(tr.length for tr in trajs)
    expect = np.zeros_like(g)
    for tr, a in zip(trajs, A):
        x = pol.policy_input(tr.obs, tr.proprio, tr.goal_enc)
        _, gi = pol.logprob_and_grad(theta, x, tr.actions, np.full(tr.length, -a / total))
        expect += gi
    assert np.allclose(g, expect, rtol=1e-10, atol=1e-14)


def test_no_baseline_matches_reinforce_oracle(models):
    groups, cfg = _micro_buffer(models, seed=1)
    theta = models[0]
    trajs = groups[0].trajectories
    R = np.array([0.8, 0.8, 0.8])
    groups[0].advantages = R.copy()
    _, g = loop.ppo_loss(groups, theta, cfg)
    total = sum(tr.length for tr in trajs)

    def surrogate(flat):
        th = theta.from_flat(flat)
        return -sum(r * pol.logprob(th, tr.obs, tr.proprio, tr.goal_enc, tr.actions).sum() for tr, r in zip(trajs, R)) / total

    assert netlib.check_grad(surrogate, g, theta.flat()) <= 1e-4


def test_ppo_gradient_matches_finite_differences_off_policy(models):
    groups, cfg = _micro_buffer(models, seed=2)
    theta = models[0]
    rng = np.random.default_rng(0)
    shifted = theta.from_flat(theta.flat() + rng.normal(0, 0.02, theta.flat().size))
    _, g = loop.ppo_loss(groups, shifted, cfg)
    f = lambda flat: loop.ppo_loss(groups, theta.from_flat(flat), cfg)[0]
    assert netlib.check_grad(f, g, shifted.flat()) <= 1e-4


def test_ppo_loss_needs_groups(models):
    with pytest.raises(ConfigurationError):
        loop.ppo_loss([], models[0], CFG)


def test_equal_rewards_leave_theta_unchanged(models):
    theta, W, _, contexts = models
    res = loop.train_iteration(theta, CFG, W, _constant_reflector(-60.0), contexts, seed=0)
    assert np.array_equal(res.theta.flat(), theta.flat())
    assert res.metrics["mean_abs_adv"] == 0.0


def test_iteration_metrics(models):
    theta, W, Rp, contexts = models
    res = loop.train_iteration(theta, CFG, W, Rp, contexts, seed=0)
    m = res.metrics
    assert m["clip_frac_first"] == 0.0 and 0.0 <= m["clip_frac"] <= 1.0
    assert 1 <= m["mean_len"] <= CFG.horizon and 0.0 <= m["term_rate"] <= 1.0
    assert not np.array_equal(res.theta.flat(), theta.flat())


def test_learning_rates_per_group(models):
    theta = models[0]
    lr = loop.learning_rates(theta, CFG)
    n_trunk, n_action, n_scale = theta.group_sizes()
    assert np.all(lr[:n_trunk] == CFG.lr_trunk) and np.all(lr[n_trunk:] == CFG.lr_heads)
    assert lr.size == n_trunk + n_action + n_scale


def test_post_train_is_deterministic(models):
    theta, W, Rp, contexts = models
    a, ha = loop.post_train(theta, CFG, W, Rp, contexts, seed=3)
    b, hb = loop.post_train(theta, CFG, W, Rp, contexts, seed=3)
    assert np.array_equal(a.flat(), b.flat()) and ha == hb
    assert [row["iter"] for row in ha] == [1, 2]
