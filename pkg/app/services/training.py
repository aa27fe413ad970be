"""End-to-end training: episode batching, rotation augmentation, AdamW steps.

Every step draws its randomness from ``derive_seed(train.seed, "step", i)``
so that a run resumed from a checkpoint at step k replays steps k+1...
exactly as the uninterrupted run would have.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from app.errors import InsufficientData, IoFailure
from app.schemas import RunConfig, TrainConfig, TrainLogRecord, threshold_key
from app.services import autograd as ag
from app.services.autograd import Tensor
from app.services.evaluation import eval_model
from app.services.model import ModelParams, embed_rotation, encode, forward_episodes, init_params, join_tokens
from app.services.optim import OptimizerState, adamw_step, zero_grads
from app.services.so3 import apply_shared_rotation, random_rotation, random_rotations, rot6d_from_matrix
from app.services.synthgen import Episode, ObjectRecord, render_views
from app.storage import Checkpoint, save_checkpoint
from app.utils.hashing import derive_seed
from app.utils.timing import timed

logger = logging.getLogger(__name__)

VALIDATION_THRESHOLD_DEG = 15.0


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, "step", step))


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def build_batch(records: Sequence[ObjectRecord], cfg: TrainConfig, rng: np.random.Generator) -> List[Episode]:
    """One episode per sampled object; objects are distinct within a batch.

    Views come from the object's stored pools (references and queries
    pooled together, drawn without replacement) or, with
    ``render_on_the_fly``, are rendered fresh at Haar-random rotations.
    """
    if len(records) < cfg.objects_per_batch:
        raise InsufficientData(
            f"batch needs {cfg.objects_per_batch} objects, dataset split has {len(records)}"
        )
    needed = cfg.n_ref + cfg.n_query
    chosen = rng.choice(len(records), size=cfg.objects_per_batch, replace=False)

    episodes = []
    for index in chosen:
        record = records[int(index)]
        ep = record.episode
        if cfg.render_on_the_fly:
            size = ep.ref_images.shape[1]
            rotations = random_rotations(rng, needed)
            images = render_views(record.obj, rotations, size, rng, str(cfg.background))
        else:
            pool_images = np.concatenate([ep.ref_images, ep.query_images])
            pool_rotations = np.concatenate([ep.ref_rotations, ep.query_rotations])
            if len(pool_images) < needed:
                raise InsufficientData(
                    f"object {ep.object_id} has {len(pool_images)} views, batch needs {needed}"
                )
            picks = rng.choice(len(pool_images), size=needed, replace=False)
            images, rotations = pool_images[picks], pool_rotations[picks]
        episodes.append(Episode(
            object_id=ep.object_id,
            ref_images=images[:cfg.n_ref],
            ref_rotations=rotations[:cfg.n_ref],
            query_images=images[cfg.n_ref:],
            query_rotations=rotations[cfg.n_ref:],
        ))
    return episodes


def augment_rotations(episode: Episode, rng: np.random.Generator, R: Optional[NDArray] = None) -> Episode:
    """Right-multiply every reference and query label by one shared rotation.

    Images are untouched; relative rotations between views are preserved.
    """
    if R is None:
        R = random_rotation(rng)
    return Episode(
        object_id=episode.object_id,
        ref_images=episode.ref_images,
        ref_rotations=apply_shared_rotation(episode.ref_rotations, R),
        query_images=episode.query_images,
        query_rotations=apply_shared_rotation(episode.query_rotations, R),
    )


# ---------------------------------------------------------------------------
# Loss and step
# ---------------------------------------------------------------------------

def rotation_loss(pred6d: Tensor, gt_rotations: NDArray) -> Tensor:
    """Mean over queries of the squared 6D distance to ground truth."""
    target = Tensor(rot6d_from_matrix(gt_rotations))
    return ag.scale(ag.mse(pred6d, target), 6.0)


def predict_episodes_6d(episodes: Sequence[Episode], params: ModelParams) -> Tensor:
    """(B, n_query, 6) predictions for same-shaped episodes, one pass."""
    n_ref = episodes[0].n_ref
    n_query = episodes[0].n_query
    ref_latents = encode(np.concatenate([e.ref_images for e in episodes]), params)
    query_latents = encode(np.concatenate([e.query_images for e in episodes]), params)
    rot_embed = embed_rotation(np.concatenate([e.ref_rotations for e in episodes]), params)
    ref_tokens = ag.add(ref_latents, rot_embed)

    batches = []
    for b in range(len(episodes)):
        batches.append(join_tokens(
            ag.slice_axis(ref_tokens, 0, b * n_ref, (b + 1) * n_ref),
            ag.slice_axis(query_latents, 0, b * n_query, (b + 1) * n_query),
            params,
        ))
    return forward_episodes(batches, params)


def episode_loss(episodes: Sequence[Episode], params: ModelParams) -> Tensor:
    pred = predict_episodes_6d(episodes, params)
    gt = np.stack([e.query_rotations for e in episodes])
    return rotation_loss(pred, gt)


def train_step(
    episodes: Sequence[Episode],
    params: ModelParams,
    state: OptimizerState,
    freeze_encoder: bool = False,
) -> float:
    """Forward, backward, one AdamW update; returns the loss before the update."""
    loss = episode_loss(episodes, params)
    ag.backward(loss)
    adamw_step(params.trainable(freeze_encoder), state)
    zero_grads(params.tensors)
    return loss.item()


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    optimizer: OptimizerState
    step: int
    log: List[TrainLogRecord] = field(default_factory=list)


def new_optimizer(cfg: TrainConfig) -> OptimizerState:
    return OptimizerState(
        lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay
    )


def validation_accuracy(params: ModelParams, records: Sequence[ObjectRecord], k: int) -> Optional[float]:
    """Acc@15 on held-out objects with FPS-selected references."""
    if not records:
        return None
    k = min(k, min(r.episode.n_ref for r in records))
    report = eval_model(params, records, k, [VALIDATION_THRESHOLD_DEG])
    return report.accuracy[threshold_key(VALIDATION_THRESHOLD_DEG)]


def _save(run_cfg: RunConfig, result: TrainResult, path) -> None:
    save_checkpoint(
        Checkpoint(
            config=run_cfg,
            params=result.params.arrays(),
            optimizer=result.optimizer,
            step=result.step,
            precision=ag.get_precision(),
        ),
        path,
    )


def _logged_step(line: str) -> Optional[int]:
    try:
        return int(json.loads(line)["step"])
    except (ValueError, KeyError, TypeError):
        return None


def _trim_log(log_path, last_step: int) -> None:
    """Drop log records past ``last_step``.

    A run interrupted between checkpoints has logged steps its checkpoint
    does not hold; the resumed run logs them again.
    """
    path = Path(log_path)
    if not path.exists():
        return
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
        kept = [line for line in lines if (s := _logged_step(line)) is not None and s <= last_step]
        if len(kept) != len(lines):
            logger.warning(f"Dropping {len(lines) - len(kept)} log records after step {last_step} from {path}")
            path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")
    except OSError as e:
        raise IoFailure(log_path, e.strerror or str(e)) from e


def train_loop(
    run_cfg: RunConfig,
    train_records: Sequence[ObjectRecord],
    val_records: Sequence[ObjectRecord] = (),
    params: Optional[ModelParams] = None,
    optimizer: Optional[OptimizerState] = None,
    start_step: int = 0,
    checkpoint_path=None,
    log_path=None,
) -> TrainResult:
    """Run steps ``start_step + 1 .. train.total_steps``.

    Checkpoints are written every ``checkpoint_every`` steps and after
    the final step; log records are appended to ``log_path`` as JSON
    lines.
    """
    cfg = run_cfg.train
    result = TrainResult(
        params=params if params is not None else init_params(run_cfg.model),
        optimizer=optimizer if optimizer is not None else new_optimizer(cfg),
        step=start_step,
    )
    log_file = None
    if log_path is not None:
        if start_step > 0:
            _trim_log(log_path, start_step)
        try:
            log_file = open(log_path, "a" if start_step > 0 else "w", encoding="utf-8")
        except OSError as e:
            raise IoFailure(log_path, e.strerror or str(e)) from e

    logger.info(
        f"Training steps {start_step + 1}..{cfg.total_steps} on {len(train_records)} objects "
        f"({cfg.objects_per_batch}x{cfg.n_ref}+{cfg.n_query}, precision {ag.get_precision()})"
    )
    last_saved = start_step if start_step > 0 else None
    config_hash = run_cfg.config_hash()
    try:
        for step in range(start_step + 1, cfg.total_steps + 1):
            rng = step_rng(cfg.seed, step)
            episodes = build_batch(train_records, cfg, rng)
            if cfg.rotation_augmentation:
                episodes = [augment_rotations(e, rng) for e in episodes]
            freeze = cfg.freeze_encoder_after is not None and step > cfg.freeze_encoder_after

            with timed() as watch:
                loss = train_step(episodes, result.params, result.optimizer, freeze_encoder=freeze)
            result.step = step

            val_acc = None
            if cfg.val_every and step % cfg.val_every == 0:
                val_acc = validation_accuracy(result.params, val_records, cfg.n_ref)

            record = TrainLogRecord(
                step=step, loss=loss, val_acc=val_acc, ms_per_step=watch.elapsed_ms, config_hash=config_hash
            )
            result.log.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record.model_dump()) + "\n")
                log_file.flush()

            if step % cfg.log_every == 0 or step == 1:
                extra = f", val Acc@15 {val_acc:.3f}" if val_acc is not None else ""
                logger.info(f"step {step}/{cfg.total_steps} loss {loss:.4f} ({watch.elapsed_ms:.0f} ms){extra}")

            if checkpoint_path is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                _save(run_cfg, result, checkpoint_path)
                last_saved = step
    finally:
        if log_file is not None:
            log_file.close()

    if checkpoint_path is not None and last_saved != result.step:
        _save(run_cfg, result, checkpoint_path)
    return result


def log_path_for(checkpoint_path) -> Path:
    """Sidecar train-log path next to a checkpoint."""
    path = Path(checkpoint_path)
    return path.with_name(path.name + ".log.jsonl")
