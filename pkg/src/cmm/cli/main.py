"""``cmm`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys

from ..errors import CMMError, ConfigurationError, DependencyError, ParseError
from .commands import COMMANDS, Context
from .config import load_config

EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_OTHER = 1


def build_parser():
    parser = argparse.ArgumentParser(prog="cmm", description="Probe, distill, fuse and backtest market-making models.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__doc__.splitlines()[0] if COMMANDS[name].__doc__ else None)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--trace", action="store_true", help="dump per-decision fusion traces")
        p.add_argument("--probe-report", metavar="PATH", help="also write the probe report (and PATH.csv) here")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_config(args.config)
        ctx = Context(rc, trace=args.trace, probe_report=args.probe_report)
        written = COMMANDS[args.command](ctx)
    except (ConfigurationError, ParseError) as exc:
        print(f"cmm {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"cmm {args.command}: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except CMMError as exc:
        print(f"cmm {args.command}: {exc}", file=sys.stderr)
        return EXIT_OTHER
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
