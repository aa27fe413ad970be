"""`rotset sweep`: reference-count, separation and coverage experiments as CSV."""

import argparse
import logging

from app.config import get_settings
from app.errors import MissingEntity
from app.middleware.command_logging import log_command
from app.routers.common import (
    SWEEP_CSV_COLUMNS,
    add_precision_flag,
    check_crop,
    float_list,
    int_list,
    load_model,
    params_from_checkpoint,
    sweep_rows,
    write_csv,
)
from app.services import autograd as ag
from app.services.evaluation import METHODS, coverage_probe, refcount_sweep, separation_sweep
from app.storage import load_dataset

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("sweep", help="Run a sweep experiment")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", required=True)
    parser.add_argument("--mode", required=True, choices=["refcount", "separation", "coverage"])
    parser.add_argument("--k", type=int_list, help="refcount: reference counts; coverage: first value is k")
    parser.add_argument("--thresholds", type=float_list, help="refcount/coverage: thresholds in degrees")
    parser.add_argument("--gaps", type=float_list, help="separation: gaps in degrees (default eval.gaps)")
    parser.add_argument("--axis", choices=["azimuth", "elevation"], default="azimuth")
    parser.add_argument("--trials", type=int, help="separation: trials per gap (default eval.trials)")
    parser.add_argument("--object", help="separation: object id (default first object of the split)")
    parser.add_argument("--method", choices=list(METHODS), default="model")
    parser.add_argument("--split", choices=["holdout", "train", "all"], default="holdout")
    parser.add_argument("--csv", help="Write the table here instead of stdout")
    add_precision_flag(parser)
    parser.set_defaults(func=run)


@log_command("sweep")
def run(args: argparse.Namespace) -> int:
    ckpt, tag = load_model(args.checkpoint, args.precision)
    eval_cfg = ckpt.config.eval
    dataset = load_dataset(args.data, expected_data_hash=ckpt.config.data_hash())
    check_crop(ckpt, dataset.manifest)
    records = dataset.split(args.split)
    thresholds = args.thresholds or eval_cfg.thresholds

    with ag.precision(tag):
        params = params_from_checkpoint(ckpt)
        if args.mode == "refcount":
            sweep = refcount_sweep(
                params, records, args.k or eval_cfg.k, thresholds,
                method=args.method, threads=get_settings().threads,
            )
        elif args.mode == "coverage":
            k = (args.k or eval_cfg.k)[0]
            sweep = coverage_probe(params, records, k, threshold=thresholds[0], method=args.method)
        else:
            if args.object is not None:
                record = dataset.find(args.object)
                if record is None:
                    raise MissingEntity(f"object '{args.object}' is not in {args.data}")
            elif records:
                record = records[0]
            else:
                raise MissingEntity(f"split '{args.split}' of {args.data} is empty")
            sweep = separation_sweep(
                params,
                record.obj,
                args.gaps or eval_cfg.gaps,
                trials=args.trials or eval_cfg.trials,
                seed=eval_cfg.seed,
                axis=args.axis,
            )

    write_csv(SWEEP_CSV_COLUMNS, sweep_rows(sweep, ckpt.config_hash), args.csv)
    return 0
