"""Learned one-step observation model ``o_{t+1} = W(o_t, s_{t+1})``.

The action reaches the model only through the next proprioceptive state, which
is computed exactly by forward kinematics; whether the object was grasped,
released or left behind has to be inferred from the current frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import envcore, netlib
from .data import TransitionSet, transitions
from .envcore import GoalSpec
from .errors import ConfigurationError, NumericError
from .netlib import AdamState, MlpSpec, ParamVector

log = logging.getLogger(__name__)

INPUT_DIM = envcore.OBS_DIM + envcore.PROPRIO_DIM
# optional derived inputs: object offset from the commanded gripper position and its length
GEOMETRY_DIM = 4
OBS_CLAMP = 5.0


@dataclass(frozen=True)
class WorldSim:
    """Network parameters plus the output parameterisation.

    With ``residual`` the network predicts ``o_{t+1} - o_t``; otherwise it
    predicts ``o_{t+1}`` directly. With ``geometry`` the input is extended by
    the offset between the current object position and the next gripper
    position, plus its norm; both are fixed functions of ``(o_t, s_{t+1})``.
    """

    params: ParamVector
    residual: bool = True
    geometry: bool = True

    def with_data(self, data: np.ndarray) -> "WorldSim":
        return WorldSim(self.params.with_data(data), self.residual, self.geometry)


@dataclass
class WorldSimConfig:
    hidden: int = 256
    activation: str = "relu"
    steps: int = 16000
    batch: int = 256
    lr: float = 1e-3
    lr_final: float = 1e-4
    val_fraction: float = 0.1
    seed: int = 0
    expert_only: bool = False
    residual: bool = True
    geometry: bool = True
    input_noise: float = 0.003


@dataclass
class WorldSimReport:
    train_rms: float
    val_rms: float
    val_episodes: list[int]
    train_episodes: list[int]
    mixture: dict[str, float]


def init_worldsim(
    seed: int, hidden: int = 256, activation: str = "relu", residual: bool = True, geometry: bool = True
) -> WorldSim:
    n_in = INPUT_DIM + (GEOMETRY_DIM if geometry else 0)
    spec = MlpSpec((n_in, hidden, hidden, envcore.OBS_DIM), activation)
    return WorldSim(netlib.init_params(spec, np.random.default_rng(seed)), residual, geometry)


def net_input(W: WorldSim, o: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    o = np.asarray(o, dtype=np.float64)
    s_next = np.asarray(s_next, dtype=np.float64)
    parts = [o, s_next]
    if W.geometry:
        offset = o[..., envcore.OBS_OBJECT] - s_next[..., 0:3]
        parts += [offset, np.linalg.norm(offset, axis=-1, keepdims=True)]
    return np.concatenate(parts, axis=-1)


def _raw_predict(W: WorldSim, o: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    o = np.asarray(o, dtype=np.float64)
    out = netlib.forward(W.params, net_input(W, o, s_next))
    return o + out if W.residual else out


def predict_obs(W: WorldSim, o: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    out = _raw_predict(W, o, s_next)
    if not np.all(np.isfinite(out)):
        raise NumericError("world simulator produced a non-finite observation")
    return np.clip(out, -OBS_CLAMP, OBS_CLAMP)


def predict_obs_unchecked(W: WorldSim, o: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    """Batched prediction that leaves non-finite rows in place for the caller to handle."""
    with np.errstate(all="ignore"):
        out = _raw_predict(W, o, s_next)
    return np.where(np.isfinite(out), np.clip(out, -OBS_CLAMP, OBS_CLAMP), out)


def training_pairs(W: WorldSim, ts: TransitionSet) -> tuple[np.ndarray, np.ndarray]:
    """Network inputs and regression targets for a transition set."""
    x = net_input(W, ts.obs, ts.proprio_next)
    y = ts.obs_next - ts.obs if W.residual else ts.obs_next
    return x, y


def mse_loss_and_grad(W: WorldSim | ParamVector, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error of the raw network output against ``y`` and its gradient."""
    params = W.params if isinstance(W, WorldSim) else W

    def loss_fn(out, batch):
        r = out - batch["y"]
        return float(np.mean(r * r)), 2.0 * r / r.size

    return netlib.grad(params, loss_fn, {"x": x, "y": y})


def rms(W: WorldSim, ts: TransitionSet) -> float:
    if len(ts) == 0:
        return float("nan")
    pred = predict_obs(W, ts.obs, ts.proprio_next)
    return float(np.sqrt(np.mean((pred - ts.obs_next) ** 2)))


def split_by_episode(ts: TransitionSet, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean train/validation masks assigning whole episodes to one side."""
    episodes = np.unique(ts.episode)
    rng = np.random.default_rng(seed)
    n_val = max(1, int(round(val_fraction * len(episodes)))) if len(episodes) > 1 else 0
    val_eps = rng.permutation(episodes)[:n_val]
    val_mask = np.isin(ts.episode, val_eps)
    return ~val_mask, val_mask


def train_worldsim(dataset: TransitionSet, config: WorldSimConfig | None = None) -> tuple[WorldSim, WorldSimReport]:
    """MSE regression with Adam on a trajectory-level 90/10 split."""
    config = config or WorldSimConfig()
    if len(dataset) == 0:
        raise ConfigurationError("world-simulator dataset is empty")
    kinds = set(np.unique(dataset.provenance).tolist())
    if config.expert_only:
        dataset = dataset[dataset.provenance == "expert"]
        if len(dataset) == 0:
            raise ConfigurationError("expert-only world simulator requested but no expert transitions present")
    elif not {"expert", "explored"} <= kinds:
        raise ConfigurationError(f"mixed world-simulator training needs expert and explored data, got {sorted(kinds)}")
    dataset.check_fk()

    train_mask, val_mask = split_by_episode(dataset, config.val_fraction, config.seed)
    train, val = dataset[train_mask], dataset[val_mask]
    W = init_worldsim(config.seed, config.hidden, config.activation, config.residual, config.geometry)
    x_clean, y_clean = training_pairs(W, train)
    rng = np.random.default_rng(config.seed + 1)
    opt = AdamState.create(W.params.spec.n_params, config.lr)
    decay = (config.lr_final / config.lr) ** (1.0 / max(config.steps, 1))
    data = W.params.data.copy()
    for step in range(config.steps):
        idx = rng.integers(0, len(train), size=min(config.batch, len(train)))
        xb, yb = x_clean[idx], y_clean[idx]
        if config.input_noise > 0.0:
            # perturbed current frames with clean next-frame targets: the model learns to pull drift back
            noise = rng.normal(0.0, config.input_noise, size=(len(idx), envcore.OBS_DIM))
            xb = net_input(W, train.obs[idx] + noise, train.proprio_next[idx])
            if W.residual:
                yb = yb - noise
        _, g = mse_loss_and_grad(W.with_data(data), xb, yb)
        opt = AdamState(opt.m, opt.v, opt.step, config.lr * decay**step)
        opt, data = netlib.adam_step(opt, data, g)
    W = W.with_data(data)
    report = WorldSimReport(
        train_rms=rms(W, train),
        val_rms=rms(W, val),
        val_episodes=sorted(np.unique(val.episode).tolist()),
        train_episodes=sorted(np.unique(train.episode).tolist()),
        mixture=dataset.mixture(),
    )
    log.info("world sim trained: train RMS %.4f, val RMS %.4f", report.train_rms, report.val_rms)
    return W, report


def collect_exploration(policy_params, tasks, episodes: int, seed: int, horizon: int = 120) -> list[envcore.Episode]:
    """Run the stochastic policy in the true environment and keep every outcome."""
    from . import policy as pol

    if episodes <= 0:
        return []
    task_ids = [tasks[i % len(tasks)] for i in range(episodes)]
    seeds = [seed + i for i in range(episodes)]
    rng = np.random.default_rng([seed, 7])
    return envcore.run_episodes(pol.make_actor(policy_params, rng), task_ids, seeds, horizon, provenance="explored")


def rollout_divergence(
    W: WorldSim, episodes: list[envcore.Episode], horizon: int
) -> np.ndarray:
    """Per-step RMS between open-loop imagined and true observations.

    Each true episode's action sequence is replayed through forward kinematics and
    the learned model from the same first frame.
    """
    if not episodes:
        return np.zeros(0)
    H = min(horizon, min(ep.length for ep in episodes))
    if H < horizon:
        raise ConfigurationError(f"episodes hold only {H} steps but divergence requested up to {horizon}")
    o_true = np.stack([ep.obs[: H + 1] for ep in episodes])
    s_true = np.stack([ep.proprio[: H + 1] for ep in episodes])
    o_hat = o_true[:, 0]
    curve = np.zeros(H)
    for t in range(H):
        o_hat = predict_obs(W, o_hat, s_true[:, t + 1])
        curve[t] = np.sqrt(np.mean((o_hat - o_true[:, t + 1]) ** 2))
    return curve


def first_step_rms(W: WorldSim, episodes: list[envcore.Episode]) -> float:
    ts = transitions([envcore.Episode(e.task_id, e.seed, e.goal, e.obs[:2], e.proprio[:2], e.actions[:1], e.success[:2]) for e in episodes])
    return rms(W, ts)


def save(path, W: WorldSim, meta: dict | None = None) -> None:
    netlib.save_sections(path, {"worldsim": W.params}, {**(meta or {}), "residual": W.residual, "geometry": W.geometry})


def load(path) -> WorldSim:
    sections, meta = netlib.load_sections(path)
    return WorldSim(sections["worldsim"], bool(meta.get("residual", True)), bool(meta.get("geometry", True)))
