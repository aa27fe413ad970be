"""rotset — command-line entry point.

Usage: ``python -m app.main <command> [flags]`` or the ``rotset`` script.

Commands: gen, train, eval, bench, sweep, attn. Machine-readable results
go to stdout (JSON or CSV); logs go to stderr. Exit codes are stable:
0 ok, 1 internal, 2 usage/config, 3 I/O, 4 hash mismatch,
5 checkpoint incompatibility, 6 missing entity.
"""

import argparse
import logging
import sys
from typing import List, Optional

from app import __version__
from app.config import get_settings
from app.errors import RotsetError
from app.routers import attn, bench, evaluate, gen, sweep, train

logger = logging.getLogger(__name__)

COMMANDS = (gen, train, evaluate, bench, sweep, attn)


def configure_logging() -> None:
    logging.basicConfig(
        level=getattr(logging, get_settings().log_level.upper(), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rotset",
        description="Reference-based object rotation estimation with a set transformer",
    )
    parser.add_argument("--version", action="version", version=f"rotset {__version__}")
    subparsers = parser.add_subparsers(dest="command", metavar="<command>", required=True)
    for module in COMMANDS:
        module.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command; returns the process exit code.

    argparse usage errors exit with status 2 on their own.
    """
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RotsetError as e:
        logger.error(str(e))
        print(f"rotset {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception:
        logger.exception(f"Unexpected failure in '{args.command}'")
        return 1


if __name__ == "__main__":
    sys.exit(main())
