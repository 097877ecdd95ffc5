"""Command-line entry point.

Subcommands: gen-trace, ingest, train, run, sweep, eval. Exit codes:
0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import marl, mobility, runner
from .config import ConfigError, ExperimentConfig, parse_config


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig().validate()
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
        cfg.marl.seed = args.seed
        cfg.trace.seed = args.seed
    if getattr(args, "scheduler", None):
        cfg.run.scheduler = args.scheduler
        cfg.validate()
    return cfg


def _print_paths(paths):
    for p in paths:
        print(p)


def cmd_gen_trace(args) -> int:
    cfg = _load_config(args)
    trace = mobility.generate_trace(cfg.trace_config(), cfg.trace.seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / "trace.csv"
    mobility.write_trace(trace, path)
    _print_paths([path])
    return 0


def cmd_ingest(args) -> int:
    trace = mobility.ingest_trace(args.path)
    print(f"rounds={trace.num_rounds} vehicles={len(trace.vehicle_ids())}")
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        path = outdir / "trace.csv"
        mobility.write_trace(trace, path)
        _print_paths([path])
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _, _, paths = runner.train_experiment(cfg, Path(args.out))
    _print_paths(paths)
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    result = runner.run_experiment(cfg)
    paths = runner.write_run_outputs(result, Path(args.out))
    _print_paths(paths)
    print(f"scheduler={result.scheduler} rounds={result.rounds_executed} "
          f"f_acc={result.final_f_acc:.4f} ecr={result.ecr:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values: {exc}") from None
    paths = runner.sweep(cfg, args.axis, values, Path(args.out),
                         reuse_policy=args.reuse_policy)
    _print_paths(paths)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    cfg.run.scheduler = "mappo"
    bundle = marl.load_bundle(args.checkpoint)
    result = runner.run_experiment(cfg, bundle=bundle)
    paths = runner.write_run_outputs(result, Path(args.out))
    _print_paths(paths)
    print(f"scheduler=mappo rounds={result.rounds_executed} "
          f"f_acc={result.final_f_acc:.4f} ecr={result.ecr:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdflsim",
        description="Mobility-aware decentralized federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scheduler=False):
        p.add_argument("--config", help="config file (sectioned key = value)")
        p.add_argument("--seed", type=int, help="override run/train/trace seeds")
        p.add_argument("--out", default="out", help="output directory")
        if scheduler:
            p.add_argument("--scheduler", choices=("mappo", "random", "dfl"))

    p = sub.add_parser("gen-trace", help="generate a synthetic mobility trace")
    common(p)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("ingest", help="validate (and re-emit) a trace CSV")
    p.add_argument("path", help="trace CSV to ingest")
    p.add_argument("--out", default="", help="re-emit the normalized trace here")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train the scheduler policies")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="run one experiment with a scheduler")
    common(p, scheduler=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep a parameter axis over all schedulers")
    common(p)
    p.add_argument("--axis", required=True,
                   choices=("E_v", "E_cloud", "N", "epsilon", "r"))
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--reuse-policy", action="store_true",
                   help="train once on the base config instead of per value")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a trained policy checkpoint")
    p.add_argument("checkpoint", help="policy checkpoint from `train`")
    common(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
