"""Seven-stage pipeline with a content-addressed manifest, evaluation and ablations.

Every stage writes into ``<out>/<stage>-<key>/`` where ``key`` hashes the
stage's own config keys together with the keys of its inputs. A stage whose
record is already in ``manifest.json`` with intact output files is skipped.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Callable, Sequence

import numpy as np

from . import config as config_mod
from . import data, envcore, loop, netlib, policy, reflector, worldsim
from .config import RunConfig
from .envcore import Episode
from .errors import ConfigurationError, ContractViolation, StageOrderError

log = logging.getLogger(__name__)

STAGES = ("demos", "bc", "scale", "explore", "worldsim", "reflector", "posttrain")

DEPENDS: dict[str, tuple[str, ...]] = {
    "demos": (),
    "bc": ("demos",),
    "scale": ("bc", "demos"),
    "explore": ("scale",),
    "worldsim": ("demos", "explore"),
    "reflector": ("demos", "explore"),
    "posttrain": ("scale", "worldsim", "reflector", "demos", "explore"),
}

CONFIG_KEYS: dict[str, tuple[str, ...]] = {
    "demos": ("tasks", "demos_per_task", "demo_pad", "demo_noise", "horizon", "data_seed"),
    "bc": ("bc",),
    "scale": ("scale",),
    "explore": ("tasks", "explore_episodes", "explore_perturb", "explore_perturb_fraction", "rl_contexts", "horizon", "data_seed"),
    "worldsim": ("worldsim",),
    "reflector": ("reflector", "reflector_train_fraction"),
    "posttrain": ("rl", "train_seed"),
}

OUTPUTS: dict[str, tuple[str, ...]] = {
    "demos": ("demos.jsonl",),
    "bc": ("bc.net",),
    "scale": ("policy.net",),
    "explore": ("explore.jsonl", "contexts.jsonl"),
    "worldsim": ("worldsim.net", "report.kv"),
    "reflector": ("reflector.net", "report.kv", "heldout.jsonl"),
    "posttrain": ("policy.net", "metrics.csv"),
}

# offsets inside a task's data seed block
_EXPLORE_OFFSET = 10_000
_CONTEXT_OFFSET = 50_000
_PERTURB_OFFSET = 30_000

MANIFEST = "manifest.json"


@dataclass
class StageResult:
    stage: str
    key: str
    path: Path
    ran: bool
    training_steps: int


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """``manifest.json`` under the output directory, keyed by stage key."""

    def __init__(self, out: Path | str):
        self.out = Path(out)
        self.path = self.out / MANIFEST
        self.records: dict[str, dict] = {}
        if self.path.exists():
            self.records = json.loads(self.path.read_text()).get("records", {})

    def save(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"records": self.records}, indent=1, sort_keys=True))
        os.replace(tmp, self.path)

    def intact(self, key: str) -> bool:
        rec = self.records.get(key)
        if rec is None:
            return False
        base = self.out / rec["dir"]
        return all((base / f).exists() and file_sha256(base / f) == h for f, h in rec["outputs"].items())


def stage_key(stage: str, cfg: RunConfig) -> str:
    if stage not in STAGES:
        raise ConfigurationError(f"unknown stage {stage!r}")
    parts = [stage, cfg.fingerprint(CONFIG_KEYS[stage])]
    parts += [stage_key(dep, cfg) for dep in DEPENDS[stage]]
    return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


def stage_dir(stage: str, cfg: RunConfig) -> Path:
    return Path(cfg.out) / f"{stage}-{stage_key(stage, cfg)}"


def _require(stage: str, cfg: RunConfig, manifest: Manifest) -> dict[str, Path]:
    inputs = {}
    for dep in DEPENDS[stage]:
        key = stage_key(dep, cfg)
        if not manifest.intact(key):
            raise StageOrderError(stage, f"{dep}-{key}")
        inputs[dep] = Path(cfg.out) / manifest.records[key]["dir"]
    return inputs


def _write_kv(path: Path, values: dict) -> None:
    lines = []
    for k, v in values.items():
        lines.append(f"{k} = {repr(float(v)) if isinstance(v, (float, np.floating)) else v}")
    path.write_text("\n".join(lines) + "\n")


def read_kv(path: Path | str) -> dict[str, str]:
    return config_mod.parse_text(Path(path).read_text())


# --- stage bodies -------------------------------------------------------------------
# Each returns (training steps, extra manifest fields).

def _truncate(ep: Episode, pad: int, horizon: int) -> Episode:
    """Cut a demo ``pad`` steps after the first success so idle frames do not dominate."""
    first = ep.first_success() or ep.length
    T = min(first + pad, horizon, ep.length)
    return Episode(ep.task_id, ep.seed, ep.goal, ep.obs[: T + 1], ep.proprio[: T + 1], ep.actions[:T], ep.success[: T + 1], ep.provenance)


def _stage_demos(cfg: RunConfig, inputs, out: Path):
    demos, seeds = [], []
    for task in cfg.tasks:
        start = cfg.data_seed_base(task)
        found, k = 0, 0
        actor = envcore.noisy_expert(cfg.demo_noise, np.random.default_rng([cfg.data_seed, task, 3]))
        while found < cfg.demos_per_task:
            if k >= 20 * cfg.demos_per_task:
                raise ConfigurationError(f"scripted expert failed too often on task {task}")
            ep = envcore.run_episodes(actor, [task], [start + k], cfg.horizon)[0]
            seeds.append(start + k)
            k += 1
            if ep.first_success() is not None:
                demos.append(_truncate(ep, cfg.demo_pad, cfg.horizon))
                found += 1
    data.write_episodes(out / "demos.jsonl", demos)
    return 0, {"seeds": _seed_ranges(seeds)}


def _stage_bc(cfg: RunConfig, inputs, out: Path):
    demos, _ = data.read_episodes(inputs["demos"] / "demos.jsonl")
    params = policy.bc_train(policy.init_policy(cfg.bc.seed), data.transitions(demos), cfg.bc)
    policy.save(out / "bc.net", params, {"stage": "bc"})
    return cfg.bc.steps, {}


def _stage_scale(cfg: RunConfig, inputs, out: Path):
    demos, _ = data.read_episodes(inputs["demos"] / "demos.jsonl")
    params = policy.load(inputs["bc"] / "bc.net")
    params = policy.scale_train(params, data.transitions(demos), cfg.scale)
    policy.save(out / "policy.net", params, {"stage": "scale"})
    return cfg.scale.steps, {}


def widen_scale(params: policy.PolicyParams, shift: float) -> policy.PolicyParams:
    """Copy whose log-scale output is raised by ``shift`` (a broader sampling distribution)."""
    flat = params.scale.data.copy()
    params.scale.spec.unflatten(flat)[-1][1][:] += shift
    return policy.PolicyParams(params.trunk, params.action, params.scale.with_data(flat))


def _stage_explore(cfg: RunConfig, inputs, out: Path):
    params = policy.load(inputs["scale"] / "policy.net")
    n_wide = int(round(cfg.explore_episodes * cfg.explore_perturb_fraction)) if cfg.explore_perturb else 0
    episodes, contexts, seeds = [], [], []
    for task in cfg.tasks:
        base = cfg.data_seed_base(task)
        n_plain = cfg.explore_episodes - n_wide
        episodes += worldsim.collect_exploration(params, [task], n_plain, base + _EXPLORE_OFFSET, cfg.horizon)
        seeds += [base + _EXPLORE_OFFSET, base + _EXPLORE_OFFSET + n_plain - 1]
        if n_wide:
            wide = widen_scale(params, cfg.explore_perturb)
            episodes += worldsim.collect_exploration(wide, [task], n_wide, base + _PERTURB_OFFSET, cfg.horizon)
            seeds += [base + _PERTURB_OFFSET, base + _PERTURB_OFFSET + n_wide - 1]
        ctx_seeds = [base + _CONTEXT_OFFSET + i for i in range(cfg.rl_contexts)]
        if ctx_seeds:
            contexts += envcore.run_episodes(envcore.expert_policy, [task] * len(ctx_seeds), ctx_seeds, 0, "context")
            seeds += [ctx_seeds[0], ctx_seeds[-1]]
    data.write_episodes(out / "explore.jsonl", episodes)
    data.write_episodes(out / "contexts.jsonl", contexts)
    return 0, {"seeds": [[seeds[i], seeds[i + 1]] for i in range(0, len(seeds), 2)]}


def _stage_worldsim(cfg: RunConfig, inputs, out: Path):
    demos, _ = data.read_episodes(inputs["demos"] / "demos.jsonl")
    explored, _ = data.read_episodes(inputs["explore"] / "explore.jsonl")
    ds = data.concat([data.transitions(demos), data.transitions(explored)])
    W, report = worldsim.train_worldsim(ds, cfg.worldsim)
    worldsim.save(out / "worldsim.net", W, {"stage": "worldsim"})
    heldout = heldout_explored(cfg, demos, explored)
    _write_kv(
        out / "report.kv",
        {
            "train_rms": report.train_rms,
            "val_rms": report.val_rms,
            "heldout_explored_rms": worldsim.rms(W, data.transitions(heldout)),
            "expert_only": cfg.worldsim.expert_only,
            **{f"mixture.{k}": v for k, v in report.mixture.items()},
        },
    )
    return cfg.worldsim.steps, {}


def heldout_explored(cfg: RunConfig, demos: Sequence[Episode], explored: Sequence[Episode]) -> list[Episode]:
    """Explored episodes in the validation split of the mixed world-sim dataset."""
    ds = data.concat([data.transitions(demos), data.transitions(explored)])
    _, val_mask = worldsim.split_by_episode(ds, cfg.worldsim.val_fraction, cfg.worldsim.seed)
    val = set(np.unique(ds.episode[val_mask]).tolist())
    return [ep for k, ep in enumerate(explored) if k + len(demos) in val]


def _split_reflector(cfg: RunConfig, explored: Sequence[Episode]):
    n_train = int(round(cfg.reflector_train_fraction * len(explored)))
    order = np.random.default_rng([cfg.reflector.seed, 3]).permutation(len(explored))
    return [explored[i] for i in sorted(order[:n_train])], [explored[i] for i in sorted(order[n_train:])]


def _stage_reflector(cfg: RunConfig, inputs, out: Path):
    demos, _ = data.read_episodes(inputs["demos"] / "demos.jsonl")
    explored, _ = data.read_episodes(inputs["explore"] / "explore.jsonl")
    train_eps, held = _split_reflector(cfg, explored)
    pool = demos + ([] if cfg.reflector.expert_only else train_eps)
    Rp = reflector.train_reflector(pool, cfg.reflector)
    if cfg.reflector.binary:
        Rp = reflector.sharpen(Rp)
    reflector.save(out / "reflector.net", Rp, {"stage": "reflector"})
    traces = reflector.traces_for(Rp, held, cfg.horizon, cfg.rl.eta)
    metrics = reflector.evaluate_traces(traces, held)
    _write_kv(out / "report.kv", metrics)
    # per-frame label and running score; the initial frame has neither
    extra = {
        k: {"y": [None, *ep.labels().tolist()], "r": [None, *tr.scores.tolist()]}
        for k, (ep, tr) in enumerate(zip(held, traces))
    }
    data.write_episodes(out / "heldout.jsonl", held, extra)
    frames = min(sum(ep.length for ep in pool), cfg.reflector.max_frames or 10**12)
    return cfg.reflector.epochs * -(-frames // cfg.reflector.batch), {}


def load_contexts(path: Path) -> list[loop.Context]:
    eps, _ = data.read_episodes(path)
    return loop.contexts_from_episodes(eps)


def _stage_posttrain(cfg: RunConfig, inputs, out: Path):
    theta = policy.load(inputs["scale"] / "policy.net")
    W = worldsim.load(inputs["worldsim"] / "worldsim.net")
    Rp = reflector.load(inputs["reflector"] / "reflector.net")
    demos, _ = data.read_episodes(inputs["demos"] / "demos.jsonl")
    contexts = loop.contexts_from_episodes(demos) + load_contexts(inputs["explore"] / "contexts.jsonl")
    timing = []
    with envcore.access_guard(forbid=False) as guard:
        clock = [time.perf_counter()]

        def tick(row):
            now = time.perf_counter()
            timing.append({"iter": row["iter"], "wall_ms": round(1000.0 * (now - clock[0]), 3)})
            clock[0] = now

        theta, history = loop.post_train(theta, cfg.rl, W, Rp, contexts, cfg.train_seed, on_iteration=tick)
    if guard.calls != 0:
        raise ContractViolation(f"post-training touched the true environment {guard.calls} times")
    policy.save(out / "policy.net", theta, {"stage": "posttrain"})
    _write_csv(out / "metrics.csv", history)
    _write_csv(out / "timing.csv", timing)
    return cfg.rl.iterations, {"env_calls": guard.calls}


def _write_csv(path: Path, rows: Sequence[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_csv(path: Path | str) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _seed_ranges(seeds: Sequence[int]) -> list[list[int]]:
    seeds = sorted(seeds)
    ranges: list[list[int]] = []
    for s in seeds:
        if ranges and s == ranges[-1][1] + 1:
            ranges[-1][1] = s
        else:
            ranges.append([s, s])
    return ranges


_BODIES: dict[str, Callable] = {
    "demos": _stage_demos,
    "bc": _stage_bc,
    "scale": _stage_scale,
    "explore": _stage_explore,
    "worldsim": _stage_worldsim,
    "reflector": _stage_reflector,
    "posttrain": _stage_posttrain,
}


def run_stage(name: str, cfg: RunConfig) -> StageResult:
    """Run one stage unless an intact record with the same key already exists."""
    if name not in STAGES:
        raise ConfigurationError(f"unknown stage {name!r}; expected one of {', '.join(STAGES)}")
    manifest = Manifest(cfg.out)
    key = stage_key(name, cfg)
    out = Path(cfg.out) / f"{name}-{key}"
    if manifest.intact(key):
        log.info("stage %s: up to date (%s)", name, key)
        return StageResult(name, key, out, False, 0)
    inputs = _require(name, cfg, manifest)
    out.mkdir(parents=True, exist_ok=True)
    log.info("stage %s: running (%s)", name, key)
    t0 = time.perf_counter()
    steps, extra = _BODIES[name](cfg, inputs, out)
    elapsed = time.perf_counter() - t0
    flat = config_mod.to_flat(cfg)
    manifest.records[key] = {
        "stage": name,
        "dir": out.name,
        "config": {k: v for k, v in flat.items() if config_mod._selected(k, CONFIG_KEYS[name])},
        "inputs": {
            dep: {"key": stage_key(dep, cfg), "outputs": manifest.records[stage_key(dep, cfg)]["outputs"]}
            for dep in DEPENDS[name]
        },
        "outputs": {f: file_sha256(out / f) for f in OUTPUTS[name]},
        "training_steps": steps,
        "created": time.time(),
        **extra,
    }
    manifest.save()
    (out / "wall_seconds.txt").write_text(f"{elapsed:.3f}\n")
    return StageResult(name, key, out, True, steps)


def run_all(cfg: RunConfig, until: str = "posttrain") -> list[StageResult]:
    results = []
    for name in STAGES[: STAGES.index(until) + 1]:
        results.append(run_stage(name, cfg))
    return results


# --- evaluation ---------------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    task_id: int
    success_rate: float
    mean_length: float
    mode: str
    half_width: float
    episodes: int

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def wilson_half_width(p: float, n: int, confidence: float = 0.95) -> float:
    z = NormalDist().inv_cdf(0.5 + confidence / 2.0)
    denom = 1.0 + z * z / n
    return float(z * np.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom)


def evaluate(
    policy_fn: envcore.PolicyFn,
    task_id: int,
    seeds: Sequence[int],
    horizon: int,
    mode: str = "reflector",
    Rp: netlib.ParamVector | None = None,
    eta: float = reflector.DEFAULT_ETA,
) -> EvalReport:
    """Success judged by the oracle at the last executed step.

    ``fixed`` always runs ``horizon`` steps; ``reflector`` stops at the first
    step whose running reflector score exceeds ``eta``. Because the true
    environment and ``policy_fn`` are deterministic given the seed, stopping
    is evaluated on the full rollout without affecting earlier steps.
    """
    if len(seeds) == 0:
        raise ConfigurationError("evaluation needs at least one episode")
    if mode not in ("reflector", "fixed"):
        raise ConfigurationError(f"unknown evaluation mode {mode!r}")
    if mode == "reflector" and Rp is None:
        raise ConfigurationError("reflector-mode evaluation needs a reflector")
    episodes = envcore.run_episodes(policy_fn, [task_id] * len(seeds), list(seeds), horizon, "eval")
    if mode == "fixed":
        ends = [horizon] * len(episodes)
    else:
        ends = [tr.t_end for tr in reflector.traces_for(Rp, episodes, horizon, eta)]
    wins = [bool(ep.success[t]) for ep, t in zip(episodes, ends)]
    rate = float(np.mean(wins))
    return EvalReport(task_id, rate, float(np.mean(ends)), mode, wilson_half_width(rate, len(wins)), len(wins))


def policy_actor(params: policy.PolicyParams) -> envcore.PolicyFn:
    """Deterministic mean-action actor."""
    return policy.make_actor(params)


def load_artifacts(cfg: RunConfig, post_trained: bool = True):
    """(policy, reflector) from the manifest, raising if the stages have not run."""
    manifest = Manifest(cfg.out)
    src = "posttrain" if post_trained else "scale"
    for stage in (src, "reflector"):
        if not manifest.intact(stage_key(stage, cfg)):
            raise StageOrderError("eval", f"{stage}-{stage_key(stage, cfg)}")
    params = policy.load(stage_dir(src, cfg) / "policy.net")
    Rp = reflector.load(stage_dir("reflector", cfg) / "reflector.net")
    return params, Rp


def evaluate_run(cfg: RunConfig, mode: str | None = None, post_trained: bool = True) -> list[EvalReport]:
    params, Rp = load_artifacts(cfg, post_trained)
    mode = mode or cfg.eval_mode
    return [evaluate(policy_actor(params), t, cfg.eval_seeds(t), cfg.horizon, mode, Rp, cfg.rl.eta) for t in cfg.tasks]


def write_eval(path: Path | str, reports: Sequence[EvalReport], label: str) -> None:
    rows = [{"policy": label, **r.as_dict()} for r in reports]
    _write_csv(Path(path), rows)


# --- ablations ----------------------------------------------------------------------

ABLATIONS = ("extra-data", "reflector-head", "termination")


@dataclass
class Comparison:
    which: str
    arms: tuple[str, str]
    rows: list[tuple[str, float, float]]

    def sign(self, metric: str) -> int:
        for name, a, b in self.rows:
            if name == metric:
                return int(np.sign(round(a - b, 12)))
        raise KeyError(metric)

    def write(self, path: Path | str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", *self.arms, "sign"])
            for name, a, b in self.rows:
                w.writerow([name, repr(float(a)), repr(float(b)), int(np.sign(round(a - b, 12)))])


def _arm(cfg: RunConfig, **sections) -> RunConfig:
    changes = {name: dataclasses.replace(getattr(cfg, name), **kw) for name, kw in sections.items()}
    return dataclasses.replace(cfg, **changes)


def _post_success(cfg: RunConfig, mode: str) -> list[EvalReport]:
    run_all(cfg)
    return evaluate_run(cfg, mode)


def ablate(cfg: RunConfig, which: str, arms: tuple[RunConfig, RunConfig] | None = None) -> Comparison:
    """Run both arms with shared seeds and compare them.

    ``arms`` overrides the default pair (used to check that identical arms
    give a zero difference).
    """
    if which not in ABLATIONS:
        raise ConfigurationError(f"unknown ablation {which!r}; expected one of {', '.join(ABLATIONS)}")
    if which == "termination":
        a_cfg, b_cfg = arms or (cfg, cfg)
        run_all(a_cfg)
        run_all(b_cfg)
        rows = []
        for ra, rb in zip(evaluate_run(a_cfg, "reflector"), evaluate_run(b_cfg, "fixed")):
            rows.append((f"success.task{ra.task_id}", ra.success_rate, rb.success_rate))
            rows.append((f"length.task{ra.task_id}", ra.mean_length, rb.mean_length))
        return Comparison(which, ("reflector", "fixed"), rows)

    if which == "extra-data":
        a_cfg, b_cfg = arms or (_arm(cfg, worldsim={"expert_only": False}), _arm(cfg, worldsim={"expert_only": True}))
        names = ("mixed", "expert_only")
    else:
        a_cfg, b_cfg = arms or (_arm(cfg, reflector={"expert_only": False}), _arm(cfg, reflector={"expert_only": True, "binary": True}))
        names = ("trained_head", "binary_expert_only")
    ra = _post_success(a_cfg, cfg.eval_mode)
    rb = _post_success(b_cfg, cfg.eval_mode)
    rows = [(f"success.task{x.task_id}", x.success_rate, y.success_rate) for x, y in zip(ra, rb)]
    if which == "extra-data":
        rows.append(("heldout_explored_rms", *(_heldout_rms(c, a_cfg) for c in (a_cfg, b_cfg))))
    else:
        rows.append(("heldout_auc", *(float(read_kv(stage_dir("reflector", c) / "report.kv")["auc"]) for c in (a_cfg, b_cfg))))
    return Comparison(which, names, rows)


def _heldout_rms(arm: RunConfig, reference: RunConfig) -> float:
    """RMS on the explored episodes held out of the reference (mixed) world sim."""
    demos, _ = data.read_episodes(stage_dir("demos", reference) / "demos.jsonl")
    explored, _ = data.read_episodes(stage_dir("explore", reference) / "explore.jsonl")
    W = worldsim.load(stage_dir("worldsim", arm) / "worldsim.net")
    return worldsim.rms(W, data.transitions(heldout_explored(reference, demos, explored)))
