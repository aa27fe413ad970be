"""`rotset eval`: accuracy report for a checkpoint, optionally paired with baselines."""

import argparse
import logging
from pathlib import Path

from app.config import get_settings
from app.middleware.command_logging import log_command
from app.routers.common import (
    SWEEP_CSV_COLUMNS,
    add_precision_flag,
    as_document,
    check_crop,
    emit_json,
    float_list,
    int_list,
    load_model,
    params_from_checkpoint,
    sweep_rows,
    write_csv,
)
from app.services import autograd as ag
from app.services.evaluation import eval_model, sweep_from_reports
from app.storage import load_dataset

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="Evaluate a checkpoint")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", required=True)
    parser.add_argument("--k", type=int_list, help="Reference counts, e.g. 8,16,32 (default eval.k)")
    parser.add_argument("--thresholds", type=float_list, help="Accuracy thresholds in degrees (default eval.thresholds)")
    parser.add_argument("--oracle", action="store_true", help="Also report the nearest-reference oracle")
    parser.add_argument("--latent-nn", action="store_true", help="Also report the latent nearest-neighbor baseline")
    parser.add_argument("--split", choices=["holdout", "train", "all"], default="holdout")
    parser.add_argument("--csv", help="CSV sidecar path (default <checkpoint>.eval.csv)")
    add_precision_flag(parser)
    parser.set_defaults(func=run)


@log_command("eval")
def run(args: argparse.Namespace) -> int:
    ckpt, tag = load_model(args.checkpoint, args.precision)
    run_cfg = ckpt.config
    dataset = load_dataset(args.data, expected_data_hash=run_cfg.data_hash())
    check_crop(ckpt, dataset.manifest)

    ks = args.k or run_cfg.eval.k
    thresholds = args.thresholds or run_cfg.eval.thresholds
    methods = ["model"] + (["oracle"] if args.oracle else []) + (["latent-nn"] if args.latent_nn else [])
    records = dataset.split(args.split)
    threads = get_settings().threads

    reports = []
    rows = []
    with ag.precision(tag):
        params = params_from_checkpoint(ckpt)
        for method in methods:
            method_reports = [
                eval_model(
                    params, records, k, thresholds, method=method, threads=threads,
                    config_hash=run_cfg.config_hash(),
                )
                for k in ks
            ]
            rows.extend(sweep_rows(
                sweep_from_reports(method_reports, thresholds), run_cfg.config_hash(), prefix=f"{method}."
            ))
            reports.extend(as_document(r) for r in method_reports)

    write_csv(SWEEP_CSV_COLUMNS, rows, args.csv or str(Path(args.checkpoint)) + ".eval.csv")
    emit_json({
        "checkpoint": args.checkpoint,
        "config_hash": run_cfg.config_hash(),
        "split": args.split,
        "objects": len(records),
        "reports": reports,
    })
    return 0
