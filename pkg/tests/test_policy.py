import math

import numpy as np
import pytest

from worldenv import data, envcore, netlib
from worldenv import policy as pol
from worldenv.errors import ConfigurationError, ContractViolation
from worldenv.policy import BcConfig, PolicyOutput, ScaleConfig


@pytest.fixture(scope="module")
def demos():
    eps = envcore.run_episodes(envcore.expert_policy, [0] * 5, range(5), 80)
    return data.transitions(eps)


def _zero_heads(params):
    n_trunk, n_action, n_scale = params.group_sizes()
    flat = params.flat()
    flat[n_trunk:] = 0.0
    return params.from_flat(flat)


def _ctx():
    state, obs, g = envcore.reset(0, 0)
    return obs, state.proprio, g


def test_predict_is_deterministic():
    params = pol.init_policy(0)
    a, b = pol.predict(params, *_ctx()), pol.predict(params, *_ctx())
    assert np.array_equal(a.mu, b.mu) and np.array_equal(a.beta, b.beta)


def test_zero_heads_give_zero_outputs():
    out = pol.predict(_zero_heads(pol.init_policy(0)), *_ctx())
    assert np.all(out.mu == 0.0) and np.all(out.beta == 0.0)


def test_fresh_scale_head_outputs_zero_beta():
    assert np.all(pol.predict(pol.init_policy(3), *_ctx()).beta == 0.0)


def test_beta_is_clamped():
    params = _zero_heads(pol.init_policy(0))
    spec = params.scale.spec
    data_ = params.scale.data.copy()
    spec.unflatten(data_)[-1][1][...] = 3.0
    params = pol.PolicyParams(params.trunk, params.action, params.scale.with_data(data_))
    assert np.all(pol.predict(params, *_ctx()).beta == 2.0)


def test_input_layout_mismatch_is_contract_violation():
    obs, s, g = _ctx()
    with pytest.raises(ContractViolation):
        pol.predict(pol.init_policy(0), obs[:10], s, g)


def test_median_sample_is_mu():
    out = PolicyOutput(np.full(7, 0.03), np.zeros(7))
    assert np.array_equal(pol.sample_from_uniform(out, np.zeros(7)), out.mu)


def test_minimum_scale_samples_stay_close():
    out = PolicyOutput(np.zeros((10000, 7)), np.full((10000, 7), pol.BETA_MIN))
    a = pol.sample_action(out, np.random.default_rng(0))
    assert np.mean(np.abs(a) < 0.02) > 0.999


def test_sample_mean_near_zero():
    out = PolicyOutput(np.zeros((100000, 7)), np.zeros((100000, 7)))
    u = np.random.default_rng(1).uniform(-0.5, 0.5, size=(100000, 7))
    raw = pol.laplace_from_uniform(out.mu, out.beta, u)
    assert np.all(np.abs(raw.mean(axis=0)) < 0.02)
    # the executed sample is the same draw clamped to the action box
    assert np.array_equal(pol.sample_from_uniform(out, u), envcore.clip_action(raw))


def test_laplace_sampler_ks():
    u = np.random.default_rng(2).uniform(-0.5, 0.5, size=100000)
    x = np.sort(pol.laplace_from_uniform(0.0, 0.0, u))
    cdf = np.where(x < 0, 0.5 * np.exp(x), 1.0 - 0.5 * np.exp(-x))
    n = x.size
    ks = max(np.max(np.arange(1, n + 1) / n - cdf), np.max(cdf - np.arange(n) / n))
    assert ks < 0.01


def test_logprob_at_mu_with_unit_scale():
    params = _zero_heads(pol.init_policy(0))
    assert abs(pol.logprob(params, *_ctx(), np.zeros(7)) + 7 * math.log(2.0)) < 1e-12


def test_logprob_decreases_with_distance():
    params = pol.init_policy(1)
    ctx = _ctx()
    mu = pol.predict(params, *ctx).mu
    lps = [pol.logprob(params, *ctx, mu + d) for d in (0.0, 0.01, 0.02, 0.05)]
    assert all(a > b for a, b in zip(lps, lps[1:]))


def test_logprob_finite_for_every_sample():
    params = pol.init_policy(2)
    eps = envcore.run_episodes(pol.make_actor(params, np.random.default_rng(0)), [0, 1], [0, 1], 20)
    for ep in eps:
        lp = pol.logprob(params, ep.obs[:-1], ep.proprio[:-1], ep.goal, ep.actions)
        assert np.all(np.isfinite(lp))


def test_logprob_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    params = pol.init_policy(0, hidden=16, head_hidden=8)
    params = params.from_flat(params.flat() + rng.normal(0, 0.05, params.flat().size))
    state, obs, g = envcore.reset_batch([0, 1, 2], [0, 1, 2])
    x = pol.policy_input(obs, state.proprio, g)
    a = envcore.clip_action(rng.normal(0, 0.05, size=(3, 7)))
    w = rng.normal(size=3)
    _, grad = pol.logprob_and_grad(params, x, a, w)
    f = lambda flat: float(np.sum(w * pol.logprob_and_grad(params.from_flat(flat), x, a, w)[0]))
    assert netlib.check_grad(f, grad, params.flat()) <= 1e-4


def test_bc_reduces_l1_and_leaves_scale(demos):
    params = pol.init_policy(0)
    before = pol.mean_l1(params, demos)
    trained = pol.bc_train(params, demos, BcConfig(steps=2000))
    assert pol.mean_l1(trained, demos) < 0.25 * before
    assert np.array_equal(trained.scale.data, params.scale.data)


def test_bc_memorizes_single_step(demos):
    one = demos[np.zeros(8, dtype=int)]
    trained = pol.bc_train(pol.init_policy(0), one, BcConfig(steps=500))
    assert pol.mean_l1(trained, one) < 1e-3


def test_bc_is_deterministic(demos):
    a = pol.bc_train(pol.init_policy(0), demos, BcConfig(steps=50))
    b = pol.bc_train(pol.init_policy(0), demos, BcConfig(steps=50))
    assert np.array_equal(a.flat(), b.flat())


def test_bc_rejects_empty_demos(demos):
    with pytest.raises(ConfigurationError):
        pol.bc_train(pol.init_policy(0), demos[np.zeros(0, dtype=int)])


def _with_actions(ts, actions):
    return data.TransitionSet(
        ts.obs, ts.proprio, actions, ts.proprio_next, ts.obs_next, ts.success, ts.goal_enc, ts.episode, ts.provenance
    )


def test_scale_learns_log_residual(demos):
    params = pol.init_policy(0)
    mu = pol.predict(params, demos.obs, demos.proprio, demos.goal_enc).mu
    r = 0.02
    signs = np.where(np.random.default_rng(0).random(mu.shape) < 0.5, -1.0, 1.0)
    target = _with_actions(demos, mu + r * signs)
    trained = pol.scale_train(params, target, ScaleConfig(steps=3000, lr=2e-3))
    beta = pol.predict(trained, demos.obs, demos.proprio, demos.goal_enc).beta
    assert np.all(np.abs(beta.mean(axis=0) - math.log(r)) < 0.3)
    assert np.array_equal(trained.theta_action, params.theta_action)


def test_scale_zero_residual_hits_floor(demos):
    params = pol.init_policy(0)
    mu = pol.predict(params, demos.obs, demos.proprio, demos.goal_enc).mu
    trained = pol.scale_train(params, _with_actions(demos, mu), ScaleConfig(steps=3000, lr=2e-3))
    beta = pol.predict(trained, demos.obs, demos.proprio, demos.goal_enc).beta
    assert np.all(beta == pol.BETA_MIN)


def test_scale_improves_heldout_nll(demos):
    train = demos[demos.episode < 4]
    held = demos[demos.episode == 4]
    params = pol.bc_train(pol.init_policy(0), train, BcConfig(steps=1000))
    trained = pol.scale_train(params, train)
    assert pol.mean_nll(trained, held) < pol.mean_nll(params, held)


def test_checkpoint_roundtrip(tmp_path):
    params = pol.init_policy(5)
    pol.save(tmp_path / "p.net", params)
    back = pol.load(tmp_path / "p.net")
    assert np.array_equal(back.flat(), params.flat())
