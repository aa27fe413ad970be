"""`rotset train`: train a model on a dataset, with resumable checkpoints."""

import argparse
import logging
from pathlib import Path

from app.errors import CheckpointIncompatible, HashMismatch
from app.middleware.command_logging import log_command
from app.routers.common import add_precision_flag, emit_json, load_run_config, params_from_checkpoint, resolve_precision
from app.services import autograd as ag
from app.services.training import log_path_for, train_loop
from app.storage import load_checkpoint, load_dataset
from app.utils.hashing import config_digest

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="Train a model")
    parser.add_argument("--config", help="RunConfig JSON (defaults, or the checkpoint's config on --resume)")
    parser.add_argument("--data", required=True, help="Dataset file from `rotset gen`")
    parser.add_argument("--out", required=True, help="Checkpoint file to write")
    parser.add_argument("--force", action="store_true", help="Train even if the dataset's data hash differs")
    parser.add_argument("--resume", action="store_true", help="Continue from the checkpoint at --out")
    add_precision_flag(parser)
    parser.set_defaults(func=run)


def _resume_key(run_cfg) -> str:
    """Config digest ignoring total_steps, which a resumed run may extend."""
    document = run_cfg.model_dump(mode="json")
    document["train"].pop("total_steps")
    return config_digest(document)


@log_command("train")
def run(args: argparse.Namespace) -> int:
    resume = load_checkpoint(args.out) if args.resume and Path(args.out).exists() else None
    if args.resume and resume is None:
        logger.warning(f"--resume given but {args.out} does not exist; starting from step 0")

    if resume is not None and args.config is None:
        run_cfg = resume.config
    else:
        run_cfg = load_run_config(args.config)
    if resume is not None and _resume_key(resume.config) != _resume_key(run_cfg):
        raise CheckpointIncompatible(f"{args.out} was trained with a different config; cannot resume")

    dataset = load_dataset(args.data)
    found = dataset.manifest.get("data_hash")
    if found != run_cfg.data_hash():
        message = f"{args.data} was generated from a different data config ({str(found)[:12]} != {run_cfg.data_hash()[:12]})"
        if not args.force:
            raise HashMismatch(message + "; pass --force to train anyway")
        logger.warning(message)

    fallback = resume.precision if resume is not None else str(run_cfg.train.precision)
    tag = resolve_precision(args.precision, fallback)
    if resume is not None and tag != resume.precision:
        raise CheckpointIncompatible(f"{args.out} holds {resume.precision} values, cannot resume in {tag}")

    with ag.precision(tag):
        params = params_from_checkpoint(resume) if resume is not None else None
        result = train_loop(
            run_cfg,
            dataset.split("train"),
            dataset.split("holdout"),
            params=params,
            optimizer=resume.optimizer if resume is not None else None,
            start_step=resume.step if resume is not None else 0,
            checkpoint_path=args.out,
            log_path=log_path_for(args.out),
        )

    emit_json({
        "checkpoint": args.out,
        "log": str(log_path_for(args.out)),
        "step": result.step,
        "final_loss": result.log[-1].loss if result.log else None,
        "precision": tag,
        "config_hash": run_cfg.config_hash(),
    })
    return 0
