"""`rotset gen`: build a synthetic dataset file."""

import argparse
import logging

from app.config import get_settings
from app.middleware.command_logging import log_command
from app.routers.common import emit_json, load_run_config
from app.services.synthgen import build_dataset

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("gen", help="Generate a synthetic object dataset")
    parser.add_argument("--config", help="RunConfig JSON (defaults when omitted)")
    parser.add_argument("--out", required=True, help="Dataset file to write")
    parser.add_argument("--threads", type=int, help="Rendering workers (default EGR_THREADS)")
    parser.set_defaults(func=run)


@log_command("gen")
def run(args: argparse.Namespace) -> int:
    run_cfg = load_run_config(args.config)
    threads = args.threads or get_settings().threads
    dataset = build_dataset(run_cfg, args.out, threads=threads)
    emit_json({"path": args.out, "manifest": dataset.manifest})
    return 0
