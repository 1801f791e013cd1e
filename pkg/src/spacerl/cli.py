"""Command-line entry point: ``spacerl {train,pretrain-baseline,verify,export-plotdata,eval}``.

Exit status: 0 on success, 1 on runtime failure (or a failed verification
property), 2 on configuration or input-file errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .algorithms import train
from .baselines import evaluate, pretrain_baseline, resolve_baseline
from .config import ExperimentConfig, dump_config, load_config
from .envs import make_env
from .errors import ConfigError
from .persist import export_plotdata, load_checkpoint, metrics_line, save_checkpoint, write_metrics
from . import verify


def _out_dir(args, cfg: ExperimentConfig | None) -> Path:
    if args.out:
        return Path(args.out)
    return Path(cfg.output.dir) if cfg is not None else Path(".")


def _load(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    if args.seed_override is not None:
        if args.seed_override < 0:
            raise ConfigError("--seed-override must be non-negative")
        cfg = dataclasses.replace(cfg, seeds=(args.seed_override,))
    return cfg


def _latest_checkpoint(shard: Path):
    """Most advanced resumable checkpoint in a seed shard, or None."""
    best = None
    for path in sorted(shard.glob("*.spck")):
        ckpt = load_checkpoint(path)
        if ckpt.train_state is not None and (best is None or ckpt.train_state.iteration > best.train_state.iteration):
            best = ckpt
    return best


def _read_shard_lines(path: Path, upto: int) -> list[str]:
    if not path.is_file():
        return []
    lines = path.read_text().splitlines()[1:]
    return [ln for ln in lines if int(ln.split(",")[1]) < upto]


def run_seed(cfg: ExperimentConfig, env, baseline, seed: int, shard: Path, resume=False) -> list[str]:
    algo = dataclasses.replace(cfg.algo, seed=seed)
    out = cfg.output
    state, lines = None, []
    if resume:
        ckpt = _latest_checkpoint(shard) if shard.is_dir() else None
        if ckpt is not None:
            state = ckpt.train_state
            lines = _read_shard_lines(shard / "metrics.csv", state.iteration)
            if len(lines) != state.iteration:
                raise ConfigError(f"{shard}: metrics shard does not cover the first {state.iteration} iterations")
    meta = {"algo": algo.algo, "seed": seed, "env": cfg.env.name}

    def on_iteration(st, rec):
        lines.append(metrics_line(seed, rec, out.record_wall_time))
        if out.checkpoint_every and st.iteration % out.checkpoint_every == 0:
            save_checkpoint(shard / f"ckpt_{st.iteration:06d}.spck", st.policy, st, meta)
            write_metrics(shard / "metrics.csv", lines)

    _, final = train(algo, env, baseline, state, on_iteration)
    write_metrics(shard / "metrics.csv", lines)
    save_checkpoint(shard / "final.spck", final.policy, final, meta)
    return lines


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    env = make_env(cfg.env.name, cfg.env.params)
    baseline = resolve_baseline(cfg.baseline, env, cfg.algo)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    merged = []
    for seed in cfg.seeds:
        merged += run_seed(cfg, env, baseline, seed, out / f"seed_{seed}", resume=args.resume)
    path = write_metrics(out / cfg.output.metrics_file, merged)
    print(f"wrote {len(merged)} rows to {path}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    if cfg.baseline.kind != "pretrain":
        raise ConfigError("pretrain-baseline needs a config whose baseline kind is 'pretrain'")
    recipe = cfg.baseline.recipe
    env = make_env(cfg.env.name, cfg.env.params)
    policy = pretrain_baseline(recipe, env, cfg.algo)
    out = _out_dir(args, cfg)
    meta = {"recipe": dataclasses.asdict(recipe), "env": cfg.env.name, "env_params": dict(cfg.env.params)}
    path = save_checkpoint(out / f"baseline_{recipe.variant}.spck", policy, None, meta)
    report = evaluate(env, policy)
    print(json.dumps({"checkpoint": str(path), **report}))
    return 0


def cmd_verify(args) -> int:
    report = verify.run_all(n_instances=args.instances, seed=args.seed)
    print(json.dumps(report, indent=2, default=str))
    failed = [name for name, r in report["checks"].items() if not r["passed"]]
    if failed:
        print("failed properties: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def cmd_export(args) -> int:
    metrics = Path(args.metrics)
    out = Path(args.out) if args.out else metrics.parent / "plotdata"
    for path in export_plotdata(metrics, out):
        print(path)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = _load(args)
        env = make_env(cfg.env.name, cfg.env.params)
    else:
        env = make_env(ckpt.meta.get("env", "point_circle"), ckpt.meta.get("env_params", {}))
    baseline = load_checkpoint(args.baseline).policy if args.baseline else None
    report = evaluate(env, ckpt.policy, baseline, n_episodes=args.episodes, seed=args.seed)
    print(json.dumps(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spacerl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML experiment config")
        p.add_argument("--out", help="output directory (defaults to output.dir of the config)")
        p.add_argument("--seed-override", type=int, help="run this single seed instead of the config's list")

    p = sub.add_parser("train", help="train one run per seed")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue each seed from its latest checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pretrain-baseline", help="pretrain the baseline policy described by the config")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("verify", help="run the subproblem and estimator property suite")
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-plotdata", help="aggregate a metrics file into mean/std series")
    p.add_argument("metrics")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval", help="roll out a checkpoint and print J_R/J_C/J_D")
    common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", help="baseline checkpoint for J_D")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=12345)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
