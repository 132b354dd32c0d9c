"""Post-training in imagination: rollouts in the learned simulator, RLOO, clipped PPO.

Every rollout starts from a stored context ``(g, o_1, s_1)``; proprioception
advances by forward kinematics, observations by the world simulator, and the
reflector decides both the terminal reward and when to stop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import envcore, netlib, policy as pol, reflector, worldsim
from .envcore import GoalSpec
from .errors import ConfigurationError, ContractViolation
from .netlib import AdamState, ParamVector
from .policy import PolicyParams
from .reflector import RewardTrace

log = logging.getLogger(__name__)

RATIO_LOG_CLAMP = 20.0


@dataclass(frozen=True)
class Context:
    g: GoalSpec
    o1: np.ndarray
    s1: np.ndarray


@dataclass
class Trajectory:
    obs: np.ndarray  # (T_n, 17) pre-action frames
    proprio: np.ndarray  # (T_n, 7)
    actions: np.ndarray  # (T_n, 7) executed (clamped) actions
    behavior_logp: np.ndarray  # (T_n,)
    final_obs: np.ndarray
    goal_enc: np.ndarray
    reward_trace: RewardTrace
    R: float

    @property
    def length(self) -> int:
        return len(self.actions)


@dataclass
class RolloutGroup:
    context: Context
    trajectories: list[Trajectory]
    baselines: np.ndarray
    advantages: np.ndarray


@dataclass
class RlConfig:
    n_rollouts: int = 8
    clip_eps: float = 0.1
    horizon: int = 120
    eta: float = 0.5
    iterations: int = 30
    epochs: int = 2
    buffer_size: int = 256
    lr_trunk: float = 3e-5
    lr_heads: float = 3e-6
    batch_size: int = 4
    max_retries: int = 3

    def __post_init__(self):
        if self.n_rollouts < 2:
            raise ConfigurationError("RLOO needs at least two rollouts per context")
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigurationError(f"clip epsilon must lie in (0, 1), got {self.clip_eps}")
        if self.buffer_size < self.n_rollouts or self.buffer_size % self.n_rollouts:
            raise ConfigurationError("buffer size must be a positive multiple of the group size")
        if self.epochs < 1 or self.batch_size < 1 or self.horizon < 1:
            raise ConfigurationError("epochs, batch size and horizon must be positive")


@dataclass
class RolloutStats:
    regenerated: int = 0
    dropped_groups: int = 0


# --- closed-form pieces -----------------------------------------------------------

def rloo_advantages(rewards: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-out baselines and advantages for one group."""
    R = np.asarray(rewards, dtype=np.float64)
    n = R.size
    if n < 2:
        raise ConfigurationError("leave-one-out baseline needs at least two rewards")
    baselines = (R.sum() - R) / (n - 1)
    return baselines, R - baselines


def importance_ratio(logp_theta, logp_phi) -> np.ndarray:
    return np.exp(np.clip(np.asarray(logp_theta) - np.asarray(logp_phi), -RATIO_LOG_CLAMP, RATIO_LOG_CLAMP))


def clipped_objective(ratio, adv, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-step ``min(r A, clip(r) A)`` and the mask of steps taking the unclipped branch."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    return np.minimum(unclipped, clipped), unclipped <= clipped


# --- rollouts ---------------------------------------------------------------------

def contexts_from_episodes(episodes: Sequence[envcore.Episode]) -> list[Context]:
    return [Context(ep.goal, ep.obs[0].copy(), ep.proprio[0].copy()) for ep in episodes]


def _stack_contexts(contexts: Sequence[Context]):
    goals = GoalSpec.stack([c.g for c in contexts])
    return goals, np.stack([c.o1 for c in contexts]), np.stack([c.s1 for c in contexts])


def _imagine(phi, W, Rp, goals: GoalSpec, o1, s1, cfg: RlConfig, rng: np.random.Generator):
    """Roll out every row in lockstep; returns per-row arrays and a row-ok mask."""
    rows = len(o1)
    T = cfg.horizon
    enc = goals.encoding
    obs = np.zeros((rows, T, envcore.OBS_DIM))
    prop = np.zeros((rows, T, envcore.PROPRIO_DIM))
    acts = np.zeros((rows, T, envcore.ACTION_DIM))
    logp = np.zeros((rows, T))
    raw = np.zeros((rows, T))
    final = np.zeros((rows, envcore.OBS_DIM))
    length = np.full(rows, T)
    active = np.ones(rows, dtype=bool)
    ok = np.ones(rows, dtype=bool)
    best = np.zeros(rows)  # running max, one slot per rollout
    o, s = o1.copy(), s1.copy()
    for t in range(T):
        out = pol.predict(phi, o, s, enc)
        u = rng.uniform(-0.5, 0.5, size=(rows, envcore.ACTION_DIM))
        a = pol.sample_from_uniform(out, u)
        lp = netlib.laplace_logpdf(a, out.mu, out.beta)
        s_next = envcore.fk(s, a)
        o_next = worldsim.predict_obs_unchecked(W, o, s_next)
        bad = active & ~np.all(np.isfinite(o_next), axis=-1)
        ok &= ~bad
        active &= ~bad
        o_next = np.where(np.isfinite(o_next), o_next, 0.0)
        obs[:, t], prop[:, t], acts[:, t], logp[:, t] = o, s, a, lp
        score = reflector.score_frame(Rp, o1, o_next, enc, (t + 1) / T)
        raw[:, t] = score
        best = np.maximum(best, score)
        stop = active & ((best > cfg.eta) | (t + 1 == T))
        length[stop] = t + 1
        final[stop] = o_next[stop]
        active &= ~stop
        if not active.any():
            break
        o, s = o_next, s_next
    return obs, prop, acts, logp, raw, final, length, ok


def collect_rollouts(
    phi: PolicyParams,
    W: worldsim.WorldSim,
    Rp: ParamVector,
    contexts: Sequence[Context],
    cfg: RlConfig,
    seed: int,
    stats: RolloutStats | None = None,
) -> list[RolloutGroup]:
    """``cfg.n_rollouts`` seeded imagined rollouts per context, grouped with RLOO advantages.

    Runs entirely inside an environment-access guard: any true-environment call raises.
    """
    stats = stats if stats is not None else RolloutStats()
    if not contexts:
        return []
    N = cfg.n_rollouts
    goals, o1, s1 = _stack_contexts(contexts)
    idx = np.repeat(np.arange(len(contexts)), N)
    with envcore.access_guard(forbid=True):
        res = list(_imagine(phi, W, Rp, goals[idx], o1[idx], s1[idx], cfg, np.random.default_rng([seed, 11])))
        ok = res[-1]
        for attempt in range(1, cfg.max_retries + 1):
            failed = np.flatnonzero(~ok)
            if failed.size == 0:
                break
            stats.regenerated += failed.size
            sub = idx[failed]
            retry = _imagine(phi, W, Rp, goals[sub], o1[sub], s1[sub], cfg, np.random.default_rng([seed, 11, attempt]))
            for k, arr in enumerate(retry):
                res[k][failed] = arr
    obs, prop, acts, logp, raw, final, length, ok = res

    groups = []
    for c, ctx in enumerate(contexts):
        rows = range(c * N, (c + 1) * N)
        if not all(ok[r] for r in rows):
            stats.dropped_groups += 1
            continue
        trajs = []
        for r in rows:
            n = int(length[r])
            trace = reflector.aggregate(raw[r, :n], cfg.eta, cfg.horizon)
            if trace.t_end != n:
                raise ContractViolation("rollout length disagrees with its reward trace")
            if not np.all(np.isfinite(logp[r, :n])):
                raise ContractViolation("non-finite behaviour log-probability")
            trajs.append(
                Trajectory(obs[r, :n], prop[r, :n], acts[r, :n], logp[r, :n], final[r], ctx.g.encoding, trace, trace.value)
            )
        baselines, adv = rloo_advantages([tr.R for tr in trajs])
        groups.append(RolloutGroup(ctx, trajs, baselines, adv))
    return groups


# --- PPO --------------------------------------------------------------------------

@dataclass
class _Flat:
    x: np.ndarray
    a: np.ndarray
    logp_old: np.ndarray
    adv: np.ndarray
    total_len: int


def _flatten(items: Sequence[tuple[Trajectory, float]]) -> _Flat:
    x = np.concatenate([pol.policy_input(tr.obs, tr.proprio, tr.goal_enc) for tr, _ in items])
    a = np.concatenate([tr.actions for tr, _ in items])
    lp = np.concatenate([tr.behavior_logp for tr, _ in items])
    adv = np.concatenate([np.full(tr.length, A) for tr, A in items])
    return _Flat(x, a, lp, adv, sum(tr.length for tr, _ in items))


def _ppo_terms(flat: _Flat, theta: PolicyParams, eps: float) -> tuple[float, np.ndarray, float]:
    # the clamped log-ratio has zero derivative outside the clamp window
    logp_new, _ = pol.logprob_and_grad(theta, flat.x, flat.a, np.zeros(len(flat.a)))
    delta = logp_new - flat.logp_old
    ratio = importance_ratio(logp_new, flat.logp_old)
    obj, take_unclipped = clipped_objective(ratio, flat.adv, eps)
    in_window = np.abs(delta) < RATIO_LOG_CLAMP
    d_logp = -(take_unclipped & in_window).astype(np.float64) * ratio * flat.adv / flat.total_len
    _, g = pol.logprob_and_grad(theta, flat.x, flat.a, d_logp)
    loss = -float(np.sum(obj)) / flat.total_len
    clip_frac = float(np.mean(np.abs(ratio - 1.0) > eps))
    return loss, g, clip_frac


def ppo_loss(groups: Sequence[RolloutGroup], theta: PolicyParams, cfg: RlConfig) -> tuple[float, np.ndarray]:
    """Clipped surrogate over a whole buffer, normalised by the total number of steps."""
    if not groups:
        raise ConfigurationError("ppo_loss needs at least one rollout group")
    items = [(tr, A) for grp in groups for tr, A in zip(grp.trajectories, grp.advantages)]
    loss, g, _ = _ppo_terms(_flatten(items), theta, cfg.clip_eps)
    return loss, g


def learning_rates(theta: PolicyParams, cfg: RlConfig) -> np.ndarray:
    n_trunk, n_action, n_scale = theta.group_sizes()
    return np.concatenate([np.full(n_trunk, cfg.lr_trunk), np.full(n_action + n_scale, cfg.lr_heads)])


def sample_contexts(contexts: Sequence[Context], count: int, rng: np.random.Generator) -> list[Context]:
    if not contexts:
        raise ConfigurationError("context dataset is empty")
    pick = rng.choice(len(contexts), size=count, replace=count > len(contexts))
    return [contexts[i] for i in pick]


@dataclass
class IterationResult:
    theta: PolicyParams
    metrics: dict[str, float]
    optimizer: AdamState
    groups: list[RolloutGroup] = field(repr=False, default_factory=list)


def train_iteration(
    theta: PolicyParams,
    cfg: RlConfig,
    W: worldsim.WorldSim,
    Rp: ParamVector,
    contexts: Sequence[Context],
    seed: int,
    optimizer: AdamState | None = None,
) -> IterationResult:
    """One behaviour snapshot, one buffer, ``cfg.epochs`` passes of mini-batch Adam."""
    rng = np.random.default_rng([seed, 23])
    phi = theta.copy()
    stats = RolloutStats()
    groups: list[RolloutGroup] = []
    n_groups = cfg.buffer_size // cfg.n_rollouts
    attempt = 0
    while len(groups) < n_groups:
        batch = sample_contexts(contexts, n_groups - len(groups), rng)
        groups += collect_rollouts(phi, W, Rp, batch, cfg, seed * 1009 + attempt, stats)
        attempt += 1
        if attempt > cfg.max_retries + 1 and len(groups) < n_groups:
            raise ContractViolation("could not fill the rollout buffer with finite imagined rollouts")
    items = [(tr, A) for grp in groups for tr, A in zip(grp.trajectories, grp.advantages)]

    with envcore.access_guard(forbid=True):
        # on-policy identity: every ratio is 1 before the first update
        full = _flatten(items)
        loss0, _, _ = _ppo_terms(full, theta, cfg.clip_eps)
        expected = -float(np.sum(full.adv)) / full.total_len
        if abs(loss0 - expected) > 1e-9 * max(1.0, abs(expected)):
            raise ContractViolation(f"loss at phi = theta is {loss0}, expected {expected}")

        lr = learning_rates(theta, cfg)
        opt = optimizer or AdamState.create(theta.flat().size, cfg.lr_trunk)
        opt = AdamState(opt.m, opt.v, opt.step, lr)
        data = theta.flat()
        current = theta
        clip_fracs = []
        first_clip = None
        for _ in range(cfg.epochs):
            order = rng.permutation(len(items))
            for start in range(0, len(items), cfg.batch_size):
                mb = _flatten([items[i] for i in order[start : start + cfg.batch_size]])
                _, g, cf = _ppo_terms(mb, current, cfg.clip_eps)
                if first_clip is None:
                    first_clip = cf
                clip_fracs.append(cf)
                if not np.any(g):
                    continue
                opt, data = netlib.adam_step(opt, data, g)
                current = theta.from_flat(data)

    rewards = np.array([tr.R for tr, _ in items])
    metrics = {
        "mean_reward": float(rewards.mean()),
        "mean_len": float(np.mean([tr.length for tr, _ in items])),
        "term_rate": float(np.mean([tr.reward_trace.terminated for tr, _ in items])),
        "clip_frac": float(np.mean(clip_fracs)) if clip_fracs else 0.0,
        "clip_frac_first": float(first_clip or 0.0),
        "mean_abs_adv": float(np.mean(np.abs([A for _, A in items]))),
        "regenerated": float(stats.regenerated),
        "dropped_groups": float(stats.dropped_groups),
    }
    return IterationResult(current, metrics, opt, groups)


def post_train(
    theta: PolicyParams,
    cfg: RlConfig,
    W: worldsim.WorldSim,
    Rp: ParamVector,
    contexts: Sequence[Context],
    seed: int,
    on_iteration=None,
) -> tuple[PolicyParams, list[dict[str, float]]]:
    history = []
    opt = None
    for it in range(cfg.iterations):
        res = train_iteration(theta, cfg, W, Rp, contexts, seed * 100003 + it, opt)
        theta, opt = res.theta, res.optimizer
        row = {"iter": it + 1, **res.metrics}
        history.append(row)
        log.info(
            "iter %d reward %.3f len %.1f term %.2f clip %.3f",
            it + 1, row["mean_reward"], row["mean_len"], row["term_rate"], row["clip_frac"],
        )
        if on_iteration is not None:
            on_iteration(row)
    return theta, history
