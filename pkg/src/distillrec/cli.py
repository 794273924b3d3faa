"""Command-line entry point.

    distillrec [--config PATH] [--seed N] [--out DIR] [--force] [--jobs N] COMMAND

Commands run one pipeline stage each; ``run-all`` chains them. Exit codes: 0
success, 2 configuration error, 3 missing prerequisite, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import load_config
from .representation import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_RUNTIME = 0, 2, 3, 4

COMMANDS = {
    "simulate": "write a seeded synthetic interaction log",
    "train-teachers": "train one DDQN teacher per task (one worker thread each)",
    "gen-distill": "build the distillation dataset from teacher soft targets",
    "train-student": "fit the multi-branch student to the distillation dataset",
    "evaluate": "roll out student, teachers and a random policy on held-out sessions",
    "bench": "model sizes and single-state latency of student vs teachers",
    "run-all": "every stage above in order",
}


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    # shared by the top-level parser and each subcommand so flags may go on either side;
    # subcommands use SUPPRESS so they do not overwrite values given before the command
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=d(None), help="key = value config file with [sections]")
    p.add_argument("--seed", type=int, default=d(None), help="root seed (overrides run.seed)")
    p.add_argument("--out", metavar="DIR", default=d("run"), help="run directory (default: ./run)")
    p.add_argument("--force", action="store_true", default=d(False), help="rerun stages that are up to date")
    p.add_argument("--jobs", type=int, default=d(1), help="worker threads for distillation data generation")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False), help="log progress")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distillrec", description=__doc__.splitlines()[0],
                                     parents=[_global_flags(True)])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, help_text in COMMANDS.items():
        sub.add_parser(name, help=help_text, parents=[_global_flags(False)])
    return parser


def _print_result(name: str, res: dict) -> None:
    summary = res["result"] or {}
    if res["skipped"]:
        print(f"{name}: up to date (use --force to rerun)")
        return
    if name == "simulate":
        print(f"simulate: wrote {summary['events']} events")
    elif name == "train-teachers":
        print(f"train-teachers: {summary['tasks']} teachers, {summary['states']} visited states")
    elif name == "gen-distill":
        print(f"gen-distill: {summary['samples']} samples from {summary['observed']} observed states")
    elif name == "train-student":
        loss = summary.get("final_loss")
        print(f"train-student: {summary['samples']} samples, final loss "
              f"{'n/a' if loss is None else format(loss, '.5f')}")
        for w in summary.get("warnings", []):
            print(f"  warning: {w}")
    elif name == "evaluate":
        print(summary["table"])
    elif name == "bench":
        print(pipeline.bench_table(summary))
    else:
        print(json.dumps(summary))


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.run.seed = args.seed
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be positive, got {args.jobs}")
        ws = pipeline.Workspace(args.out)
        names = pipeline.STAGES if args.command == "run-all" else (args.command,)
        for name in names:
            fn = pipeline.STAGE_FUNCS[name]
            res = fn(cfg, ws, args.force, jobs=args.jobs) if name == "gen-distill" else fn(cfg, ws, args.force)
            _print_result(name, res)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.PrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except Exception as exc:  # any other failure is a runtime error for the caller
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
