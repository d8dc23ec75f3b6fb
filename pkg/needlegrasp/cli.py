# coding: utf-8
"""needlegrasp: simulate autonomous visual-servo grasping of a suturing needle.
"""

import argparse
import json
import pathlib
import sys

from . import config, harness, utils
from .exceptions import MismatchReport, NeedleGraspError

log = utils.get_logger(__name__)

_CONFIG_ARG = {
    "--config": {
        "action": "store",
        "type": pathlib.Path,
        "default": None,
        "help": "scenario file (.toml or .json); the defaults are used if omitted",
    }
}

# subcommand tree
COMMANDS = {
    "top-level": {
        "--verbose": {"action": "count", "default": 0, "help": "more logging (repeatable)"},
        "--quiet": {"action": "store_true", "help": "only log errors"},
    },
    "calibrate": {
        "help": "simulate the calibration procedures and report their residuals",
        "args": {
            **_CONFIG_ARG,
            "--seed": {"action": "store", "type": int, "default": None, "help": "noise seed"},
        },
    },
    "run": {
        "help": "run a single grasp trial",
        "args": {
            **_CONFIG_ARG,
            "--seed": {"action": "store", "type": int, "required": True, "help": "trial seed"},
            "--trace": {
                "action": "store",
                "type": pathlib.Path,
                "default": None,
                "help": "write the trial trace CSV here (relative to the output directory)",
            },
        },
    },
    "batch": {
        "help": "run a batch of trials and write a JSON report",
        "args": {
            **_CONFIG_ARG,
            "-n": {"action": "store", "type": int, "default": None, "help": "number of trials"},
            "--out": {
                "action": "store",
                "type": pathlib.Path,
                "default": pathlib.Path("report.json"),
                "help": "report file (relative to the output directory)",
            },
            "--traces": {
                "action": "store",
                "type": pathlib.Path,
                "default": None,
                "help": "folder for the per-trial trace CSVs",
            },
            "--jobs": {"action": "store", "type": int, "default": 1, "help": "worker processes"},
        },
    },
    "verify-accuracy": {
        "help": "recompute the path-planning accuracy table (exits 1 on mismatch)",
        "aliases": ["verify-paper"],
        "args": {},
    },
    "show-config": {
        "help": "print the merged scenario as TOML",
        "args": {**_CONFIG_ARG},
    },
}


def _in_output_dir(pth: pathlib.Path) -> pathlib.Path:
    return pth if pth.is_absolute() else utils.output_dir() / pth


def cmd_calibrate(args) -> int:
    scenario = config.load_config(args.config)
    report = harness.simulate_calibration(scenario, args.seed)
    print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    return 0 if report.exact_ok else 1


def cmd_run(args) -> int:
    scenario = config.load_config(args.config)
    record = harness.run_trial(scenario, args.seed)
    if args.trace is not None:
        pth = utils.atomic_write(_in_output_dir(args.trace), harness.trace_csv(record))
        log.info(f"SUCCESS: wrote trace to {pth}.")
    print(json.dumps(record.summary(), sort_keys=True, indent=2))
    return 0


def cmd_batch(args) -> int:
    scenario = config.load_config(args.config)
    out = _in_output_dir(args.out)
    traces = _in_output_dir(args.traces) if args.traces is not None else None
    report = harness.run_batch(
        scenario, args.n, jobs=args.jobs, out=out, trace_dir=traces, progress=not args.quiet
    )
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "trials"}, sort_keys=True, indent=2))
    return 0


def cmd_verify_accuracy(args) -> int:
    try:
        report = harness.verify_accuracy_table()
    except MismatchReport as err:
        log.error(f"{err}")
        for row in err.rows:
            log.error(f"row {row.acquisition}: tabulated {row.error}, recomputed {row.recomputed:.3f}")
        return 1

    print(report.table())
    return 0


def cmd_show_config(args) -> int:
    print(config.load_config(args.config).to_toml(), end="")
    return 0


HANDLERS = {
    "calibrate": cmd_calibrate,
    "run": cmd_run,
    "batch": cmd_batch,
    "verify-accuracy": cmd_verify_accuracy,
    "show-config": cmd_show_config,
}


def _add_args(parser: argparse.ArgumentParser, args: dict) -> None:
    for name, kwargs in args.items():
        parser.add_argument(name, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        prog="needlegrasp",
    )
    _add_args(parser, COMMANDS["top-level"])

    subparsers = parser.add_subparsers(dest="command")
    for name, spec in COMMANDS.items():
        if name == "top-level":
            continue
        sub = subparsers.add_parser(name, help=spec["help"], aliases=spec.get("aliases", []))
        _add_args(sub, spec["args"])
        sub.set_defaults(func=HANDLERS[name])

    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()

    if len(argv) == 0:
        parser.print_help()
        return 1

    args = parser.parse_args(argv)
    utils.set_verbosity(args.verbose, args.quiet)

    if getattr(args, "func", None) is None:
        parser.print_help()
        return 1

    try:
        return args.func(args)
    except NeedleGraspError as err:
        log.error(f"{type(err).__name__}: {err}")
        return 1
