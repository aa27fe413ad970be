"""`rotset bench`: onboarding vs per-query latency and peak memory, as CSV."""

import argparse
import logging

from app.middleware.command_logging import log_command
from app.routers.common import add_precision_flag, int_list, load_model, params_from_checkpoint, write_csv
from app.services import autograd as ag
from app.services.bench import BENCH_COLUMNS, bench_latency

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("bench", help="Benchmark latency and memory")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--refs", type=int_list, default=[16, 64], help="Reference counts, e.g. 16,64")
    parser.add_argument("--queries", type=int, default=30)
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--csv", help="Write the table here instead of stdout")
    add_precision_flag(parser)
    parser.set_defaults(func=run)


@log_command("bench")
def run(args: argparse.Namespace) -> int:
    ckpt, tag = load_model(args.checkpoint, args.precision)
    with ag.precision(tag):
        params = params_from_checkpoint(ckpt)
        rows = bench_latency(
            params, args.refs, n_queries=args.queries, repeats=args.repeats, seed=args.seed,
            config_hash=ckpt.config_hash,
        )
    write_csv(BENCH_COLUMNS, [[getattr(row, c) for c in BENCH_COLUMNS] for row in rows], args.csv)
    return 0
