"""Run configuration and its flat ``key = value`` text format.

Nested module configs are addressed with dotted keys, e.g. ``rl.clip_eps = 0.1``
or ``worldsim.steps = 12000``. Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import envcore
from .errors import ConfigurationError
from .loop import RlConfig
from .policy import BcConfig, ScaleConfig
from .reflector import ReflectorConfig
from .worldsim import WorldSimConfig

# seed blocks: everything used to build training artifacts lives below EVAL_SEED_BASE
SEED_STRIDE = 1_000_000
EVAL_SEED_BASE = 1_000_000_000

_SECTIONS = ("bc", "scale", "worldsim", "reflector", "rl")


@dataclass
class RunConfig:
    tasks: list[int] = field(default_factory=lambda: [0])
    demos_per_task: int = 5
    demo_pad: int = 15
    demo_noise: float = 0.01
    horizon: int = 120
    explore_episodes: int = 1000
    # log-scale shift for the widened share of exploration episodes (0 disables it)
    explore_perturb: float = 0.0
    explore_perturb_fraction: float = 0.5
    reflector_train_fraction: float = 0.8
    rl_contexts: int = 2000
    eval_episodes: int = 200
    eval_mode: str = "reflector"
    data_seed: int = 0
    train_seed: int = 0
    eval_seed: int = 0
    out: str = "runs/default"
    bc: BcConfig = field(default_factory=BcConfig)
    scale: ScaleConfig = field(default_factory=ScaleConfig)
    worldsim: WorldSimConfig = field(default_factory=WorldSimConfig)
    reflector: ReflectorConfig = field(default_factory=ReflectorConfig)
    rl: RlConfig = field(default_factory=RlConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.tasks:
            raise ConfigurationError("at least one task is required")
        for t in self.tasks:
            envcore.check_task(t)
        if self.demos_per_task < 1:
            raise ConfigurationError("demos_per_task must be positive")
        if self.demo_noise < 0.0:
            raise ConfigurationError("demo_noise must be non-negative")
        if self.eval_mode not in ("reflector", "fixed"):
            raise ConfigurationError(f"eval_mode must be 'reflector' or 'fixed', got {self.eval_mode!r}")
        if not 0.0 < self.reflector_train_fraction < 1.0:
            raise ConfigurationError("reflector_train_fraction must lie in (0, 1)")
        for name in ("data_seed", "train_seed", "eval_seed"):
            if not 0 <= getattr(self, name) < 900:
                raise ConfigurationError(f"{name} must lie in [0, 900)")
        if self.rl.horizon != self.horizon or self.reflector.horizon != self.horizon:
            raise ConfigurationError("rl.horizon and reflector.horizon must equal horizon")

    # seeds ---------------------------------------------------------------------

    def data_seed_base(self, task_id: int) -> int:
        """First env seed of the data block for one task (demos, exploration, contexts)."""
        return self.data_seed * SEED_STRIDE + task_id * (SEED_STRIDE // 10)

    def eval_seeds(self, task_id: int, count: int | None = None) -> list[int]:
        n = self.eval_episodes if count is None else count
        start = EVAL_SEED_BASE + self.eval_seed * SEED_STRIDE + task_id * (SEED_STRIDE // 10)
        return list(range(start, start + n))

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every seed (data, train, eval and per-module) set to ``seed``."""
        modules = {s: dataclasses.replace(getattr(self, s), seed=seed) for s in _SECTIONS if s != "rl"}
        return dataclasses.replace(self, data_seed=seed, train_seed=seed, eval_seed=seed, **modules)

    # hashing -------------------------------------------------------------------

    def fingerprint(self, keys: typing.Iterable[str] | None = None) -> str:
        """Stable hash of the chosen flat keys (all keys by default)."""
        flat = to_flat(self)
        chosen = sorted(flat) if keys is None else sorted(k for k in flat if _selected(k, keys))
        text = "\n".join(f"{k}={flat[k]}" for k in chosen)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _selected(key: str, prefixes: typing.Iterable[str]) -> bool:
    return any(key == p or key.startswith(p + ".") for p in prefixes)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def to_flat(cfg: RunConfig) -> dict[str, str]:
    out: dict[str, str] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sub in dataclasses.fields(value):
                out[f"{f.name}.{sub.name}"] = _format(getattr(value, sub.name))
        else:
            out[f.name] = _format(value)
    return out


def _parse(raw: str, hint: Any, key: str) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is list:
            return [_parse(p, args[0], key) for p in raw.split(",") if p.strip()]
        if origin in (typing.Union, types.UnionType):
            if raw.lower() == "none" and type(None) in args:
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _parse(raw, inner, key)
        if hint is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
    except (ValueError, IndexError) as exc:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigurationError(f"unsupported field type for {key}")


def from_flat(values: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply flat overrides on top of ``base`` (defaults if omitted); unknown keys are errors."""
    base = base or RunConfig()
    top_hints = typing.get_type_hints(RunConfig)
    top: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {s: {} for s in _SECTIONS}
    for key, raw in values.items():
        head, _, tail = key.partition(".")
        if tail:
            if head not in _SECTIONS:
                raise ConfigurationError(f"unknown config section {head!r}")
            sub_cls = type(getattr(base, head))
            hints = typing.get_type_hints(sub_cls)
            if tail not in hints:
                raise ConfigurationError(f"unknown config key {key!r}")
            nested[head][tail] = _parse(raw, hints[tail], key)
        else:
            if key not in top_hints or key in _SECTIONS:
                raise ConfigurationError(f"unknown config key {key!r}")
            top[key] = _parse(raw, top_hints[key], key)
    sections = {}
    for s in _SECTIONS:
        current = getattr(base, s)
        sections[s] = dataclasses.replace(current, **nested[s]) if nested[s] else dataclasses.replace(current)
    return dataclasses.replace(base, **top, **sections)


def parse_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = raw.strip()
    return values


def load(path: Path | str, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return from_flat(parse_text(text), base)


def dump(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg).items())


def save(path: Path | str, cfg: RunConfig) -> None:
    Path(path).write_text(dump(cfg))
