"""Goal-conditioned control policy with a Laplace scale head.

A shared trunk feeds two heads of identical shape: the action head gives the
location ``mu`` and the scale head gives the log-scale ``beta`` of a factorized
Laplace action distribution. The policy is Markovian: it sees only the current
observation, proprioception and goal encoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import envcore, netlib
from .data import TransitionSet
from .envcore import GoalSpec
from .errors import ConfigurationError, ContractViolation
from .netlib import AdamState, MlpSpec, ParamVector

INPUT_DIM = envcore.OBS_DIM + envcore.PROPRIO_DIM + envcore.GOAL_ENC_DIM
BETA_MIN = -6.0
BETA_MAX = 2.0
# head outputs are in units of the per-dimension action range
ACTION_SCALE = np.array([envcore.POS_DELTA_MAX] * 3 + [envcore.ROT_DELTA_MAX] * 3 + [1.0])


@dataclass(frozen=True)
class PolicyParams:
    trunk: ParamVector
    action: ParamVector
    scale: ParamVector

    def flat(self) -> np.ndarray:
        return np.concatenate([self.trunk.data, self.action.data, self.scale.data])

    def from_flat(self, flat: np.ndarray) -> "PolicyParams":
        a = self.trunk.spec.n_params
        b = a + self.action.spec.n_params
        return PolicyParams(self.trunk.with_data(flat[:a]), self.action.with_data(flat[a:b]), self.scale.with_data(flat[b:]))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.trunk.copy(), self.action.copy(), self.scale.copy())

    @property
    def theta_action(self) -> np.ndarray:
        return np.concatenate([self.trunk.data, self.action.data])

    @property
    def theta_scale(self) -> np.ndarray:
        return self.scale.data

    def group_sizes(self) -> tuple[int, int, int]:
        return self.trunk.spec.n_params, self.action.spec.n_params, self.scale.spec.n_params


@dataclass(frozen=True)
class PolicyOutput:
    mu: np.ndarray
    beta: np.ndarray


def init_policy(seed: int, hidden: int = 128, head_hidden: int = 64, activation: str = "relu") -> PolicyParams:
    rng = np.random.default_rng(seed)
    trunk = netlib.init_params(MlpSpec((INPUT_DIM, hidden, hidden), activation, activation), rng)
    head_spec = MlpSpec((hidden, head_hidden, envcore.ACTION_DIM), activation)
    action = netlib.init_params(head_spec, rng)
    # zero output layer: beta = 0 everywhere until calibrated, hidden layer still trainable
    scale = netlib.init_params(head_spec, rng)
    W_out, b_out = head_spec.unflatten(scale.data)[-1]
    W_out[...] = 0.0
    b_out[...] = 0.0
    return PolicyParams(trunk, action, scale)


def policy_input(o: np.ndarray, s: np.ndarray, g) -> np.ndarray:
    enc = g.encoding if isinstance(g, GoalSpec) else np.asarray(g, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if o.shape[-1] != envcore.OBS_DIM or s.shape[-1] != envcore.PROPRIO_DIM or enc.shape[-1] != envcore.GOAL_ENC_DIM:
        raise ContractViolation(f"policy input widths {o.shape[-1]}, {s.shape[-1]}, {enc.shape[-1]} do not match layout")
    enc = np.broadcast_to(enc, o.shape[:-1] + (envcore.GOAL_ENC_DIM,))
    return np.concatenate([o, s, enc], axis=-1)


@dataclass
class _PolicyCache:
    trunk: object
    action: object
    scale: object
    mu_raw: np.ndarray
    beta_raw: np.ndarray


def _forward(params: PolicyParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, _PolicyCache]:
    feats, c_trunk = netlib.forward_with_cache(params.trunk, x)
    head, c_action = netlib.forward_with_cache(params.action, feats)
    beta_raw, c_scale = netlib.forward_with_cache(params.scale, feats)
    mu_raw = head * ACTION_SCALE
    mu = np.clip(mu_raw, envcore.ACTION_LOW, envcore.ACTION_HIGH)
    beta = np.clip(beta_raw, BETA_MIN, BETA_MAX)
    return mu, beta, _PolicyCache(c_trunk, c_action, c_scale, mu_raw, beta_raw)


def _backward(
    params: PolicyParams, cache: _PolicyCache, d_mu_raw: np.ndarray | None, d_beta_raw: np.ndarray | None
) -> np.ndarray:
    """Gradient (flat, full policy layout) from derivatives w.r.t. the unclamped head outputs."""
    g_trunk = np.zeros(params.trunk.spec.n_params)
    g_action = np.zeros(params.action.spec.n_params)
    g_scale = np.zeros(params.scale.spec.n_params)
    d_feats = 0.0
    if d_mu_raw is not None:
        g_action, d_f = netlib.backward(params.action, cache.action, d_mu_raw * ACTION_SCALE)
        d_feats = d_feats + d_f
    if d_beta_raw is not None:
        g_scale, d_f = netlib.backward(params.scale, cache.scale, d_beta_raw)
        d_feats = d_feats + d_f
    if d_mu_raw is not None or d_beta_raw is not None:
        g_trunk, _ = netlib.backward(params.trunk, cache.trunk, d_feats)
    return np.concatenate([g_trunk, g_action, g_scale])


def predict(params: PolicyParams, o, s, g) -> PolicyOutput:
    mu, beta, _ = _forward(params, policy_input(o, s, g))
    return PolicyOutput(mu, beta)


def laplace_from_uniform(mu, beta, u) -> np.ndarray:
    """Inverse-CDF Laplace draw from ``u`` uniform in (-0.5, 0.5), before any clamping."""
    return np.asarray(mu) - np.exp(beta) * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def sample_from_uniform(out: PolicyOutput, u: np.ndarray) -> np.ndarray:
    """Laplace action for the uniform draw ``u``, clamped to the action box."""
    return envcore.clip_action(laplace_from_uniform(out.mu, out.beta, u))


def sample_action(out: PolicyOutput, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(-0.5, 0.5, size=np.shape(out.mu))
    return sample_from_uniform(out, u)


def logprob(params: PolicyParams, o, s, g, a) -> np.ndarray:
    out = predict(params, o, s, g)
    return netlib.laplace_logpdf(a, out.mu, out.beta)


def logprob_and_grad(params: PolicyParams, x: np.ndarray, a: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample log-probabilities and the gradient of ``sum(weights * logp)``.

    ``x`` is the stacked policy input (see ``policy_input``). Clamped outputs
    pass no gradient, which is the true derivative away from the clamp edges.
    """
    mu, beta, cache = _forward(params, x)
    logp = netlib.laplace_logpdf(a, mu, beta)
    d_mu, d_beta = netlib.laplace_logpdf_grad(a, mu, beta)
    w = np.asarray(weights, dtype=np.float64)[..., None]
    mu_free = (cache.mu_raw >= envcore.ACTION_LOW) & (cache.mu_raw <= envcore.ACTION_HIGH)
    beta_free = (cache.beta_raw >= BETA_MIN) & (cache.beta_raw <= BETA_MAX)
    g = _backward(params, cache, w * d_mu * mu_free, w * d_beta * beta_free)
    return logp, g


# --- supervised training --------------------------------------------------------

@dataclass
class BcConfig:
    steps: int = 2000
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0


@dataclass
class ScaleConfig:
    steps: int = 1000
    batch: int = 8
    lr: float = 5e-4
    seed: int = 0


def _inputs(demos: TransitionSet) -> np.ndarray:
    return policy_input(demos.obs, demos.proprio, demos.goal_enc)


def bc_loss_and_grad(params: PolicyParams, x: np.ndarray, a: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean L1 between demonstrated actions and the (unclamped) action-head output.

    Gradient is restricted to the trunk and action head; the scale-head block is zero.
    """
    _, _, cache = _forward(params, x)
    loss = float(np.mean(netlib.l1_loss(a, cache.mu_raw)))
    d_mu = np.sign(cache.mu_raw - a) / a.size
    return loss, _backward(params, cache, d_mu, None)


def scale_loss_and_grad(params: PolicyParams, x: np.ndarray, a: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean Laplace NLL with ``mu`` held fixed; only the scale-head block is nonzero."""
    mu, beta, cache = _forward(params, x)
    loss = float(np.mean(netlib.laplace_nll(a, mu, beta)))
    _, d_beta_logp = netlib.laplace_logpdf_grad(a, mu, beta)
    beta_free = (cache.beta_raw >= BETA_MIN) & (cache.beta_raw <= BETA_MAX)
    d_beta = -d_beta_logp * beta_free / a.size
    g_scale, _ = netlib.backward(params.scale, cache.scale, d_beta)
    n_trunk, n_action, _ = params.group_sizes()
    return loss, np.concatenate([np.zeros(n_trunk + n_action), g_scale])


def bc_train(params: PolicyParams, demos: TransitionSet, config: BcConfig | None = None) -> PolicyParams:
    """Behaviour cloning of the trunk and action head; the scale head is left untouched."""
    config = config or BcConfig()
    if len(demos) == 0:
        raise ConfigurationError("bc_train needs at least one demonstration step")
    rng = np.random.default_rng(config.seed)
    x_all = _inputs(demos)
    a_all = demos.actions
    n_trunk, n_action, _ = params.group_sizes()
    theta = params.theta_action.copy()
    opt = AdamState.create(theta.size, config.lr)
    current = params
    for _ in range(config.steps):
        idx = rng.integers(0, len(demos), size=min(config.batch, len(demos)))
        _, g = bc_loss_and_grad(current, x_all[idx], a_all[idx])
        opt, theta = netlib.adam_step(opt, theta, g[: n_trunk + n_action])
        current = current.from_flat(np.concatenate([theta, params.scale.data]))
    return current


def scale_train(params: PolicyParams, demos: TransitionSet, config: ScaleConfig | None = None) -> PolicyParams:
    """Fit the scale head by Laplace NLL against the frozen action head."""
    config = config or ScaleConfig()
    if len(demos) == 0:
        raise ConfigurationError("scale_train needs at least one demonstration step")
    rng = np.random.default_rng(config.seed)
    x_all = _inputs(demos)
    a_all = demos.actions
    n_trunk, n_action, _ = params.group_sizes()
    frozen = params.theta_action
    phi = params.scale.data.copy()
    opt = AdamState.create(phi.size, config.lr)
    current = params
    for _ in range(config.steps):
        idx = rng.integers(0, len(demos), size=min(config.batch, len(demos)))
        _, g = scale_loss_and_grad(current, x_all[idx], a_all[idx])
        opt, phi = netlib.adam_step(opt, phi, g[n_trunk + n_action :])
        current = current.from_flat(np.concatenate([frozen, phi]))
    return current


def mean_l1(params: PolicyParams, demos: TransitionSet) -> float:
    _, _, cache = _forward(params, _inputs(demos))
    return float(np.mean(netlib.l1_loss(demos.actions, cache.mu_raw)))


def mean_nll(params: PolicyParams, demos: TransitionSet) -> float:
    mu, beta, _ = _forward(params, _inputs(demos))
    return float(np.mean(netlib.laplace_nll(demos.actions, mu, beta)))


# --- checkpoints -------------------------------------------------------------------

def save(path, params: PolicyParams, meta: dict | None = None) -> None:
    netlib.save_sections(path, {"trunk": params.trunk, "action": params.action, "scale": params.scale}, meta)


def load(path) -> PolicyParams:
    sections, _ = netlib.load_sections(path)
    return PolicyParams(sections["trunk"], sections["action"], sections["scale"])


def make_actor(params: PolicyParams, rng: np.random.Generator | None = None):
    """True-environment actor: deterministic ``mu`` if ``rng`` is None, else a Laplace sample."""

    def act(state, obs, goals: GoalSpec) -> np.ndarray:
        out = predict(params, obs, state.proprio, goals)
        if rng is None:
            return out.mu
        return sample_action(out, rng)

    return act
