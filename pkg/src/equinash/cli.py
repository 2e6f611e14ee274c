"""Command line entry point: ``equinash <mode> --config <path> --out <dir> [--seed N]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .experiment import MODES, ConfigError, load_config, run_experiment
from .market import THREADS_ENV


def build_parser():
    parser = argparse.ArgumentParser(
        prog="equinash",
        description="Broker / informed-trader equilibrium experiments.",
        epilog=f"Set {THREADS_ENV} to override the number of worker threads.",
    )
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", required=True, help="JSON config document")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    manifest = run_experiment(config, args.mode, args.out)
    status = "PASS" if manifest.passed else "FAIL"
    print(f"{args.mode}: {status} ({len(manifest.files)} files in {args.out})")
    if manifest.failure:
        print(manifest.failure, file=sys.stderr)
    return 0 if manifest.passed else 1


if __name__ == "__main__":
    sys.exit(main())
