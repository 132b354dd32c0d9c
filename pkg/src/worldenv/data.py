"""Transition datasets and the line-delimited trajectory file format."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import envcore
from .envcore import Episode, GoalSpec
from .errors import ConfigurationError, ContractViolation

TRAJ_SCHEMA = "worldenv-traj-v1"


@dataclass(frozen=True)
class Transition:
    o: np.ndarray
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    o_next: np.ndarray
    success: bool


@dataclass
class TransitionSet:
    """Column-wise transitions; ``episode`` indexes the source trajectory."""

    obs: np.ndarray
    proprio: np.ndarray
    actions: np.ndarray
    proprio_next: np.ndarray
    obs_next: np.ndarray
    success: np.ndarray
    goal_enc: np.ndarray
    episode: np.ndarray
    provenance: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, idx) -> "TransitionSet":
        return TransitionSet(*(getattr(self, f)[idx] for f in _FIELDS))

    def record(self, i: int) -> Transition:
        return Transition(
            self.obs[i], self.proprio[i], self.actions[i], self.proprio_next[i], self.obs_next[i], bool(self.success[i])
        )

    def check_fk(self) -> None:
        """Every record must satisfy ``s_next == fk(s, a)`` exactly."""
        expected = envcore.fk(self.proprio, self.actions)
        bad = np.flatnonzero(np.any(expected != self.proprio_next, axis=-1))
        if bad.size:
            raise ContractViolation(f"{bad.size} transitions violate s_next = fk(s, a) (first at {bad[0]})")

    def mixture(self) -> dict[str, float]:
        n = max(len(self), 1)
        kinds, counts = np.unique(self.provenance, return_counts=True)
        return {str(k): float(c) / n for k, c in zip(kinds, counts)}


_FIELDS = ("obs", "proprio", "actions", "proprio_next", "obs_next", "success", "goal_enc", "episode", "provenance")


def transitions(episodes: Sequence[Episode]) -> TransitionSet:
    if not episodes:
        return TransitionSet(
            np.zeros((0, envcore.OBS_DIM)),
            np.zeros((0, envcore.PROPRIO_DIM)),
            np.zeros((0, envcore.ACTION_DIM)),
            np.zeros((0, envcore.PROPRIO_DIM)),
            np.zeros((0, envcore.OBS_DIM)),
            np.zeros(0, dtype=bool),
            np.zeros((0, envcore.GOAL_ENC_DIM)),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype="<U8"),
        )
    cols: dict[str, list] = {f: [] for f in _FIELDS}
    for k, ep in enumerate(episodes):
        T = ep.length
        cols["obs"].append(ep.obs[:-1])
        cols["proprio"].append(ep.proprio[:-1])
        cols["actions"].append(ep.actions)
        cols["proprio_next"].append(ep.proprio[1:])
        cols["obs_next"].append(ep.obs[1:])
        cols["success"].append(ep.success[1:])
        cols["goal_enc"].append(np.repeat(ep.goal.encoding[None, :], T, axis=0))
        cols["episode"].append(np.full(T, k, dtype=np.int64))
        cols["provenance"].append(np.full(T, ep.provenance, dtype="<U8"))
    return TransitionSet(*(np.concatenate(cols[f]) for f in _FIELDS))


def concat(sets: Iterable[TransitionSet]) -> TransitionSet:
    """Concatenate, renumbering episodes so ids stay unique."""
    sets = [s for s in sets if len(s)]
    if not sets:
        return transitions([])
    parts = []
    offset = 0
    for s in sets:
        parts.append(s.episode + offset)
        offset += int(s.episode.max()) + 1
    merged = {f: np.concatenate([getattr(s, f) for s in sets]) for f in _FIELDS}
    merged["episode"] = np.concatenate(parts)
    return TransitionSet(**merged)


# --- trajectory files -----------------------------------------------------------

def write_episodes(path: Path | str, episodes: Sequence[Episode], extra: dict[int, dict[str, Sequence]] | None = None) -> None:
    """One JSON object per frame; the final frame of each episode carries ``a: null``.

    ``extra`` maps episode index to additional per-frame columns (e.g. ``y``).
    """
    extra = extra or {}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": TRAJ_SCHEMA, "episodes": len(episodes)}) + "\n")
        for k, ep in enumerate(episodes):
            cols = extra.get(k, {})
            for t in range(ep.length + 1):
                rec = {
                    "episode": k,
                    "t": t,
                    "o": ep.obs[t].tolist(),
                    "s": ep.proprio[t].tolist(),
                    "a": ep.actions[t].tolist() if t < ep.length else None,
                    "success": bool(ep.success[t]),
                    "task_id": ep.task_id,
                    "seed": ep.seed,
                    "goal": np.asarray(ep.goal.goal_pose).tolist(),
                    "provenance": ep.provenance,
                }
                for name, values in cols.items():
                    v = values[t] if t < len(values) else None
                    rec[name] = v.item() if isinstance(v, np.generic) else v
                fh.write(json.dumps(rec) + "\n")


def read_episodes(path: Path | str) -> tuple[list[Episode], dict[int, dict[str, list]]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != TRAJ_SCHEMA:
            raise ConfigurationError(f"{path}: unexpected trajectory schema {header.get('schema')!r}")
        frames: dict[int, list[dict]] = {}
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                frames.setdefault(rec["episode"], []).append(rec)
    known = {"episode", "t", "o", "s", "a", "success", "task_id", "seed", "goal", "provenance"}
    episodes = []
    extras: dict[int, dict[str, list]] = {}
    for k in sorted(frames):
        recs = sorted(frames[k], key=lambda r: r["t"])
        first = recs[0]
        acts = [r["a"] for r in recs[:-1]]
        episodes.append(
            Episode(
                task_id=int(first["task_id"]),
                seed=int(first["seed"]),
                goal=GoalSpec(np.array(int(first["task_id"])), np.array(first["goal"], dtype=np.float64)),
                obs=np.array([r["o"] for r in recs], dtype=np.float64),
                proprio=np.array([r["s"] for r in recs], dtype=np.float64),
                actions=np.array(acts, dtype=np.float64).reshape(len(acts), envcore.ACTION_DIM),
                success=np.array([r["success"] for r in recs], dtype=bool),
                provenance=first.get("provenance", "expert"),
            )
        )
        cols = sorted(set(first) - known)
        if cols:
            extras[len(episodes) - 1] = {c: [r.get(c) for r in recs] for c in cols}
    return episodes, extras
