"""Command-line entry point: ``metaimagine <subcommand> [options]``.

Every :class:`TrainConfig` field is exposed as ``--field-name`` on the
training subcommands and overrides the value from ``--config``.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_FAILURE = 1  # the run itself cannot support the request (missing files, entangled latent, ...)
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    from .metatrain import TrainConfig

    p.add_argument("--config", help="key = value config file")
    g = p.add_argument_group("config overrides")
    for f in dataclasses.fields(TrainConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", metavar=f.name.upper(), default=None,
                       help=f"(default {f.default})")


def _config_from_args(args):
    from .metatrain import TrainConfig

    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return cfg.with_overrides(overrides).validate()


def _progress(row: dict) -> None:
    keys = ("iteration", "elbo", "train_return", "eval_return", "disentanglement")
    parts = []
    for k in keys:
        v = row.get(k)
        if v is None or v == "":
            continue
        parts.append(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}")
    print(" ".join(parts), flush=True)


def cmd_train(args) -> int:
    from .metatrain import meta_train

    art = meta_train(_config_from_args(args), progress=None if args.quiet else _progress)
    print(f"checkpoint: {art.checkpoint}\nmetrics: {art.metrics_csv}\nimaginary tasks: {art.imaginary_manifest}")
    return EXIT_OK


def cmd_train_worldmodel(args) -> int:
    from .metatrain import train_worldmodel

    art = train_worldmodel(_config_from_args(args), progress=None if args.quiet else _progress)
    print(f"checkpoint: {art.checkpoint}\nmetrics: {art.metrics_csv}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metatrain import evaluate_run, load_run, make_test_tasks, meta_test_adapt

    run = load_run(args.run)
    report = evaluate_run(run, seed=args.seed, probe_pairs=args.probe_pairs, probe_vectors=args.probe_vectors)
    print(report.summary())
    out = Path(args.out) if args.out else Path(args.run) / "eval.csv"
    report.to_csv(out)
    if run.agent is not None and args.adapt_tasks > 0:
        specs = make_test_tasks(run.tasks, args.adapt_tasks, seed=args.seed)
        res = meta_test_adapt(run, specs, args.context_budget, seeds=tuple(range(args.seed, args.seed + 3)))
        print(f"post-adaptation return {res.mean:.3f} ± {res.var:.3f} "
              f"(prior-conditioned {res.prior_returns.mean():.3f})")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    from .imagination import compose_imaginary_contexts, factor_map_from_means, write_imaginary_manifest
    from .metatrain import load_run

    run = load_run(args.run)
    fmap = run.factor_map
    if fmap is None:
        if run.real_posterior_means is None:
            raise ValueError("run has neither a factor map nor real posterior means")
        fmap = factor_map_from_means(run.tasks[0].factor_names, np.stack([t.vector() for t in run.tasks]),
                                     run.real_posterior_means, args.density or run.config.interp_density)
    items = compose_imaginary_contexts(fmap, np.random.default_rng(args.seed), args.count, run.real_posterior_means)
    out = Path(args.out) if args.out else Path(args.run) / "interpolated_tasks.csv"
    if out.exists():
        out.unlink()
    write_imaginary_manifest(out, items, iteration=None, config_hash=run.config_hash, latent_dim=fmap.latent_dim)
    counts = {t: sum(1 for _, k in items if k == t) for t in (1, 2, 3)}
    print(f"wrote {len(items)} imaginary tasks to {out} (by type: {counts})")
    return EXIT_OK


def cmd_plot(args) -> int:
    from .evalkit import PLOT_KINDS, emit_plots

    kinds = PLOT_KINDS if args.kind == "all" else (args.kind,)
    for kind in kinds:
        for path in emit_plots(args.run, kind, args.out, args.extra_runs):
            print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metaimagine", description="Meta-RL with disentangled task inference and imagined tasks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="full meta-training loop")
    _add_config_flags(p)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-worldmodel", help="encoder and world model only")
    _add_config_flags(p)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train_worldmodel)

    p = sub.add_parser("eval", help="representation metrics and meta-test adaptation for a run")
    p.add_argument("run", help="run directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-pairs", type=int, default=5)
    p.add_argument("--probe-vectors", type=int, default=200)
    p.add_argument("--adapt-tasks", type=int, default=8)
    p.add_argument("--context-budget", type=int, default=100)
    p.add_argument("--out", help="metric CSV path (default RUN/eval.csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("interpolate", help="write an imaginary-task manifest from a run")
    p.add_argument("run")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--density", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("plot", help="render figures from a run")
    p.add_argument("run")
    p.add_argument("--kind", choices=("traversal", "profiles", "curves", "all"), default="all")
    p.add_argument("--extra-runs", nargs="*", default=[], help="more run dirs for learning curves")
    p.add_argument("--out", help="output directory (default RUN/plots)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    from .metatrain import ConfigError, NumericError
    from .imagination import NonDisentangledError
    from .worldmodel import ImaginationError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ImaginationError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NonDisentangledError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
