"""Command-line front-end: run one experiment, sweep config files, export scatters."""

from __future__ import annotations

import argparse
import glob
import sys
from dataclasses import replace
from pathlib import Path

from .sim import ExperimentConfig, export_scatter, run_experiment


def _load_config(path: str, args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(path)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _progress(done: int, total: int) -> None:
    if done == total or done % max(total // 20, 1) == 0:
        print(f"  {done}/{total} trials", file=sys.stderr)


def _cmd_run(args) -> int:
    cfg = _load_config(args.config, args)
    result = run_experiment(cfg, workers=args.threads,
                            progress=_progress if args.verbose else None)
    for method in cfg.precoders:
        bers = ", ".join(f"{snr:g} dB: {ber:.3e}"
                         for snr, ber in zip(cfg.snr_db, result.ber(method)))
        print(f"{method:8s} {bers}")
    if cfg.out:
        print(f"results written to {Path(cfg.out) / 'result.json'}")
    print(f"wall clock: {result.wall_clock_sec:.1f} s")
    return 0


def _cmd_sweep(args) -> int:
    paths = sorted(glob.glob(args.pattern))
    if not paths:
        print(f"no config files match {args.pattern!r}", file=sys.stderr)
        return 1
    for path in paths:
        print(f"== {path}")
        run_args = argparse.Namespace(config=path, seed=args.seed, out=None,
                                      threads=args.threads, verbose=args.verbose)
        status = _cmd_run(run_args)
        if status:
            return status
    return 0


def _cmd_export_scatter(args) -> int:
    cfg = _load_config(args.config, args)
    out = args.out or "scatter.csv"
    path = export_scatter(cfg, out, trial=args.trial, snr_index=args.snr_index)
    print(f"scatter written to {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ccpsim",
        description="Coded multi-user MISO precoding experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config", help="path to a YAML config file")
    p_run.add_argument("--seed", type=int, default=None, help="override the seed")
    p_run.add_argument("--threads", type=int, default=1,
                       help="worker processes for trials")
    p_run.add_argument("--out", default=None, help="override the output directory")
    p_run.add_argument("--verbose", action="store_true", help="print progress")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run every config matching a glob")
    p_sweep.add_argument("pattern", help="glob of config files")
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--threads", type=int, default=1)
    p_sweep.add_argument("--verbose", action="store_true")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_sc = sub.add_parser("export-scatter",
                          help="noiseless received-signal scatter CSV")
    p_sc.add_argument("config")
    p_sc.add_argument("--out", default=None, help="output CSV path")
    p_sc.add_argument("--trial", type=int, default=0)
    p_sc.add_argument("--snr-index", type=int, default=0)
    p_sc.add_argument("--seed", type=int, default=None)
    p_sc.set_defaults(func=_cmd_export_scatter)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
