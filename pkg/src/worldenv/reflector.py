"""Learned completion scorer and termination rule.

Each frame is scored from ``(o_1, o_t, goal, t / T)``; the per-step reward is
the running maximum of frame scores, so a momentary success is never lost.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import envcore, netlib
from .envcore import Episode, GoalSpec
from .errors import ConfigurationError
from .netlib import AdamState, MlpSpec, ParamVector

log = logging.getLogger(__name__)

INPUT_DIM = 2 * envcore.OBS_DIM + envcore.GOAL_ENC_DIM + 1
DEFAULT_ETA = 0.5


@dataclass(frozen=True)
class RewardTrace:
    scores: np.ndarray
    eta: float
    t_end: int
    terminated: bool

    @property
    def value(self) -> float:
        """Reward at the termination step (or the last available step)."""
        return float(self.scores[min(self.t_end, len(self.scores)) - 1])


@dataclass
class ReflectorConfig:
    hidden: int = 64
    activation: str = "relu"
    epochs: int = 50
    batch: int = 8
    lr: float = 1e-4
    horizon: int = 120
    seed: int = 0
    max_frames: int | None = 6000
    # ablation arm: train on demonstrations only and answer yes/no
    expert_only: bool = False
    binary: bool = False


def init_reflector(seed: int, hidden: int = 64, activation: str = "relu") -> ParamVector:
    spec = MlpSpec((INPUT_DIM, hidden, hidden, 1), activation)
    return netlib.init_params(spec, np.random.default_rng(seed))


def frame_input(o1, ot, g, t_frac) -> np.ndarray:
    ot = np.asarray(ot, dtype=np.float64)
    enc = g.encoding if isinstance(g, GoalSpec) else np.asarray(g, dtype=np.float64)
    lead = ot.shape[:-1]
    o1 = np.broadcast_to(np.asarray(o1, dtype=np.float64), lead + (envcore.OBS_DIM,))
    enc = np.broadcast_to(enc, lead + (envcore.GOAL_ENC_DIM,))
    tf = np.broadcast_to(np.asarray(t_frac, dtype=np.float64), lead)[..., None]
    return np.concatenate([o1, ot, enc, tf], axis=-1)


def score_frame(Rp: ParamVector, o1, ot, g, t_frac) -> np.ndarray:
    """Completion probability for one frame (or a batch of frames)."""
    logit = netlib.forward(Rp, frame_input(o1, ot, g, t_frac))
    return netlib.sigmoid(logit[..., 0])


def aggregate(raw_scores: Sequence[float], eta: float = DEFAULT_ETA, horizon: int | None = None) -> RewardTrace:
    """Running-max trace and the first step whose score exceeds ``eta`` (1-based)."""
    raw = np.asarray(raw_scores, dtype=np.float64)
    if raw.size == 0:
        raise ConfigurationError("reward trace needs at least one frame")
    scores = np.maximum.accumulate(raw)
    above = np.flatnonzero(scores > eta)
    if above.size:
        return RewardTrace(scores, eta, int(above[0]) + 1, True)
    return RewardTrace(scores, eta, int(horizon if horizon is not None else raw.size), False)


def reward(
    Rp: ParamVector, o_hist: np.ndarray, g, T: int, eta: float = DEFAULT_ETA, first_obs: np.ndarray | None = None
) -> RewardTrace:
    """Score every frame of ``o_hist`` (frame k is step k / T) against the episode's first frame.

    ``first_obs`` defaults to ``o_hist[0]``; rollouts pass the context frame and
    only the post-action frames.
    """
    o_hist = np.asarray(o_hist, dtype=np.float64)
    if len(o_hist) == 0:
        raise ConfigurationError("reward needs a nonempty observation history")
    o1 = o_hist[0] if first_obs is None else first_obs
    t = np.arange(1, len(o_hist) + 1) / T
    return aggregate(score_frame(Rp, o1, o_hist, g, t), eta, T)


class RunningReward:
    """Incremental trace for a batch of concurrent rollouts (one running max per rollout)."""

    def __init__(self, Rp: ParamVector, o1: np.ndarray, goal_enc: np.ndarray, horizon: int, eta: float = DEFAULT_ETA):
        self.Rp = Rp
        self.o1 = o1
        self.goal_enc = goal_enc
        self.horizon = horizon
        self.eta = eta
        self.best = np.zeros(len(o1))
        self.steps = 0

    def update(self, ot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Add one frame per rollout; returns (running scores, crossed-threshold mask)."""
        self.steps += 1
        s = score_frame(self.Rp, self.o1, ot, self.goal_enc, self.steps / self.horizon)
        self.best = np.maximum(self.best, s)
        return self.best.copy(), self.best > self.eta


# --- training ---------------------------------------------------------------------

def validate_labels(labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if np.any(np.diff(labels) < 0):
        raise ConfigurationError("frame labels must be nondecreasing (completed at or before t)")


def frame_dataset(episodes: Sequence[Episode], horizon: int, labels: Sequence[np.ndarray] | None = None):
    """Stack post-action frames of every episode into reflector inputs and labels."""
    xs, ys = [], []
    for k, ep in enumerate(episodes):
        y = ep.labels() if labels is None else np.asarray(labels[k])
        validate_labels(y)
        t = np.arange(1, ep.length + 1) / horizon
        xs.append(frame_input(ep.obs[0], ep.obs[1:], ep.goal, t))
        ys.append(y.astype(np.float64))
    if not xs:
        return np.zeros((0, INPUT_DIM)), np.zeros(0)
    return np.concatenate(xs), np.concatenate(ys)


def bce_loss_and_grad(Rp: ParamVector, x: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[float, np.ndarray]:
    def loss_fn(out, batch):
        loss, dz = netlib.bce_with_logits(out[:, 0], batch["y"])
        wn = batch["w"] / batch["w"].sum()
        return float(np.sum(wn * loss)), (wn * dz)[:, None]

    return netlib.grad(Rp, loss_fn, {"x": x, "y": y, "w": w})


def train_reflector(
    episodes: Sequence[Episode], config: ReflectorConfig | None = None, labels: Sequence[np.ndarray] | None = None
) -> ParamVector:
    """Per-frame BCE with inverse-frequency class weights, Adam, fixed epochs."""
    config = config or ReflectorConfig()
    x, y = frame_dataset(episodes, config.horizon, labels)
    if len(y) == 0 or y.min() == y.max():
        raise ConfigurationError("reflector training needs both success and failure frames")
    rng = np.random.default_rng(config.seed)
    if config.max_frames is not None and len(y) > config.max_frames:
        keep = np.sort(rng.choice(len(y), size=config.max_frames, replace=False))
        x, y = x[keep], y[keep]
    pos = y.mean()
    weights = np.where(y > 0.5, 0.5 / pos, 0.5 / (1.0 - pos))

    Rp = init_reflector(config.seed, config.hidden, config.activation)
    data = Rp.data.copy()
    opt = AdamState.create(data.size, config.lr)
    n = len(y)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            _, g = bce_loss_and_grad(Rp.with_data(data), x[idx], y[idx], weights[idx])
            opt, data = netlib.adam_step(opt, data, g)
    return Rp.with_data(data)


def sharpen(Rp: ParamVector, factor: float = 1e3) -> ParamVector:
    """Scale the output layer so the score saturates to a hard yes/no answer."""
    data = Rp.data.copy()
    w, b = Rp.spec.unflatten(data)[-1]
    w *= factor
    b *= factor
    return Rp.with_data(data)


# --- evaluation -------------------------------------------------------------------

def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def traces_for(Rp: ParamVector, episodes: Sequence[Episode], horizon: int, eta: float = DEFAULT_ETA) -> list[RewardTrace]:
    return [reward(Rp, ep.obs[1:], ep.goal, horizon, eta, first_obs=ep.obs[0]) for ep in episodes]


def evaluate_traces(traces: Sequence[RewardTrace], episodes: Sequence[Episode]) -> dict[str, float]:
    all_scores = np.concatenate([tr.scores for tr in traces])
    all_labels = np.concatenate([ep.labels() for ep in episodes])
    matches = []
    lags = []
    for tr, ep in zip(traces, episodes):
        truth = ep.first_success()
        matches.append(tr.terminated == (truth is not None))
        if tr.terminated and truth is not None:
            lags.append(abs(tr.t_end - truth))
    return {
        "auc": roc_auc(all_scores, all_labels),
        "termination_accuracy": float(np.mean(matches)),
        "mean_lag": float(np.mean(lags)) if lags else float("nan"),
        "episodes": float(len(episodes)),
    }


def eval_reflector(Rp: ParamVector, episodes: Sequence[Episode], horizon: int, eta: float = DEFAULT_ETA) -> dict[str, float]:
    """Frame-level AUC of the trace scores, termination agreement, and detection lag."""
    if not episodes:
        raise ConfigurationError("reflector evaluation needs held-out episodes")
    return evaluate_traces(traces_for(Rp, episodes, horizon, eta), episodes)


def save(path, Rp: ParamVector, meta: dict | None = None) -> None:
    netlib.save_sections(path, {"reflector": Rp}, meta)


def load(path) -> ParamVector:
    sections, _ = netlib.load_sections(path)
    return sections["reflector"]
