"""`rotset attn`: last-layer attention of one query over its references."""

import argparse
import logging

import numpy as np

from app.errors import MissingEntity
from app.middleware.command_logging import log_command
from app.routers.common import add_precision_flag, check_crop, emit_json, load_model, params_from_checkpoint
from app.services import autograd as ag
from app.services.model import attention_scores, bank_tokens, onboard
from app.services.so3 import fps_select, geodesic_angle
from app.storage import load_dataset

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("attn", help="Dump attention weights for one query")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--data", required=True)
    parser.add_argument("--object", required=True, help="Object id")
    parser.add_argument("--query", required=True, type=int, help="Index into the object's query pool")
    parser.add_argument("--k", type=int, help="FPS reference count (default train.n_ref)")
    parser.add_argument("--layer", type=int, default=-1, help="Transformer layer (default last)")
    add_precision_flag(parser)
    parser.set_defaults(func=run)


@log_command("attn")
def run(args: argparse.Namespace) -> int:
    ckpt, tag = load_model(args.checkpoint, args.precision)
    dataset = load_dataset(args.data, expected_data_hash=ckpt.config.data_hash())
    check_crop(ckpt, dataset.manifest)

    record = dataset.find(args.object)
    if record is None:
        raise MissingEntity(f"object '{args.object}' is not in {args.data}")
    ep = record.episode
    if not 0 <= args.query < ep.n_query:
        raise MissingEntity(f"object '{args.object}' has no query {args.query} (pool of {ep.n_query})")

    k = min(args.k or ckpt.config.train.n_ref, ep.n_ref)
    picks = fps_select(ep.ref_rotations, k)
    refs = ep.ref_rotations[picks]
    query_rotation = ep.query_rotations[args.query]

    with ag.precision(tag):
        params = params_from_checkpoint(ckpt)
        bank = onboard(ep.ref_images[picks], refs, params)
        batch = bank_tokens(bank, ep.query_images[args.query:args.query + 1], params)
        weights = attention_scores(batch, params, args.layer)[0]

    emit_json({
        "object_id": args.object,
        "query_index": args.query,
        "layer": args.layer,
        "query_rotation": query_rotation.tolist(),
        "references": [
            {
                "pool_index": int(index),
                "rotation": refs[i].tolist(),
                "weight": float(weights[i]),
                "geodesic_deg": float(np.degrees(geodesic_angle(refs[i], query_rotation))),
            }
            for i, index in enumerate(picks)
        ],
    })
    return 0
