"""Command-line entry point: ``worldenv <verb> [--config PATH] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import pipeline
from .errors import ConfigurationError, NumericError

log = logging.getLogger("worldenv")

VERBS = (*pipeline.STAGES, "eval", "ablate", "all", "plot")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="worldenv", description=__doc__.splitlines()[0])
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", type=Path, help="flat key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--seed", type=int, help="sets data, train, eval and module seeds")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--expert-only", action="store_true", help="train the world sim on demonstrations only")
    parser.add_argument("--mode", choices=("reflector", "fixed"), help="evaluation termination mode")
    parser.add_argument("--which", choices=pipeline.ABLATIONS, default="termination", help="ablation to run")
    parser.add_argument("--bc-steps", type=int)
    parser.add_argument("--scale-steps", type=int)
    parser.add_argument("--policy", choices=("posttrain", "bc"), default="posttrain", help="policy to evaluate")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.out:
        overrides["out"] = args.out
    if args.expert_only:
        overrides["worldsim.expert_only"] = "true"
    if args.mode:
        overrides["eval_mode"] = args.mode
    if args.bc_steps is not None:
        overrides["bc.steps"] = str(args.bc_steps)
    if args.scale_steps is not None:
        overrides["scale.steps"] = str(args.scale_steps)
    cfg = config_mod.from_flat(overrides, cfg) if overrides else cfg
    cfg.validate()
    return cfg


def _report_stage(res: pipeline.StageResult) -> None:
    state = "ran" if res.ran else "up to date"
    print(f"{res.stage}: {state} ({res.path})")


def plot_rewards(metrics_csv: Path, out_svg: Path) -> None:
    """Imagined reward and termination rate against iteration."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = pipeline.read_csv(metrics_csv)
    it = [int(r["iter"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(it, [float(r["mean_reward"]) for r in rows], label="mean reward")
    ax.plot(it, [float(r["term_rate"]) for r in rows], label="termination rate", linestyle="--")
    ax.set_xlabel("iteration")
    ax.set_ylim(0.0, 1.0)
    ax.legend(loc="lower right")
    fig.tight_layout()
    # fixed hash salt keeps the SVG byte-stable across runs
    matplotlib.rcParams["svg.hashsalt"] = "worldenv"
    fig.savefig(out_svg, format="svg", metadata={"Date": None})
    plt.close(fig)


def run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save(out / "config.txt", cfg)
    verb = args.verb
    if verb in pipeline.STAGES:
        _report_stage(pipeline.run_stage(verb, cfg))
    elif verb == "all":
        for res in pipeline.run_all(cfg):
            _report_stage(res)
        reports = pipeline.evaluate_run(cfg)
        pipeline.write_eval(out / f"eval_{cfg.eval_mode}.csv", reports, "posttrain")
        for r in reports:
            print(f"task {r.task_id}: success {r.success_rate:.3f} +/- {r.half_width:.3f} ({r.mode}, E={r.episodes})")
    elif verb == "eval":
        post = args.policy == "posttrain"
        reports = pipeline.evaluate_run(cfg, post_trained=post)
        path = out / f"eval_{args.policy}_{cfg.eval_mode}.csv"
        pipeline.write_eval(path, reports, args.policy)
        for r in reports:
            print(f"task {r.task_id}: success {r.success_rate:.3f} +/- {r.half_width:.3f} ({r.mode}, E={r.episodes})")
        print(f"report: {path}")
    elif verb == "ablate":
        comp = pipeline.ablate(cfg, args.which)
        path = out / f"ablate_{args.which}.csv"
        comp.write(path)
        for name, a, b in comp.rows:
            print(f"{name}: {comp.arms[0]}={a:.4f} {comp.arms[1]}={b:.4f}")
        print(f"report: {path}")
    elif verb == "plot":
        metrics = pipeline.stage_dir("posttrain", cfg) / "metrics.csv"
        if not metrics.exists():
            raise ConfigurationError(f"no post-training metrics at {metrics}; run posttrain first")
        target = out / "rewards.svg"
        plot_rewards(metrics, target)
        print(f"plot: {target}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
