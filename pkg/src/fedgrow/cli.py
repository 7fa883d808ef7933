"""Command-line entry point.

Verbs: run, validate, report, count. Exit code 0 on success; on failure a
machine-readable JSON error object goes to stderr and the exit code is
nonzero. FEDGROW_SEED and FEDGROW_OUT override the seed and output
directory when the flags are absent.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, validate_config
from .runner import reemit_reports, resource_report, run_experiment


def _emit_error(kind: str, details) -> None:
    payload = {"error": kind, "details": details if isinstance(details, list) else [str(details)]}
    json.dump(payload, sys.stderr)
    sys.stderr.write("\n")


def _load(args) -> "ExperimentConfig":
    config = validate_config(args.config)
    preset = getattr(args, "preset", None)
    if preset:
        config = replace(config, preset=preset)
    seed = getattr(args, "seed", None)
    if seed is None and os.environ.get("FEDGROW_SEED"):
        seed = int(os.environ["FEDGROW_SEED"])
    if seed is not None:
        config = replace(config, seed=seed)
    return config


def _out_dir(args, config) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if os.environ.get("FEDGROW_OUT"):
        return Path(os.environ["FEDGROW_OUT"])
    return Path("runs") / f"{config.preset}_seed{config.seed}"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedgrow", description="Federated transformer growth, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment preset end to end")
    val_p = sub.add_parser("validate", help="check a config file and print the normalized form")
    count_p = sub.add_parser("count", help="parameter and communication accounting only")
    report_p = sub.add_parser("report", help="re-emit summaries from a run bundle")

    for p in (run_p, val_p, count_p):
        p.add_argument("--config", required=True, help="path to a JSON experiment config")
    for p in (run_p, count_p):
        p.add_argument("--preset", choices=("agg", "noagg", "scratch", "fedavg_matched"))
        p.add_argument("--seed", type=int)
    run_p.add_argument("--out", help="output bundle directory")
    report_p.add_argument("--run", required=True, help="bundle directory of a previous run")

    args = parser.parse_args(argv)
    try:
        if args.command == "validate":
            config = validate_config(args.config)
            print(json.dumps(config.to_dict(), sort_keys=True, indent=2))
        elif args.command == "count":
            config = _load(args)
            print(json.dumps(resource_report(config), sort_keys=True, indent=2))
        elif args.command == "run":
            config = _load(args)
            summary = run_experiment(config, _out_dir(args, config))
            print(json.dumps(summary, sort_keys=True, indent=2))
        elif args.command == "report":
            print(json.dumps(reemit_reports(args.run), sort_keys=True, indent=2))
    except ConfigError as exc:
        _emit_error("config", exc.errors)
        return 2
    except Exception as exc:  # noqa: BLE001 - boundary: report anything as JSON
        _emit_error(type(exc).__name__, str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
