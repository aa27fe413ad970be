"""Metrics, baselines and sweep experiments.

Three predictors share one evaluation protocol (FPS-selected references
from each object's reference pool, every query of the object's query
pool predicted in a single pass):

  - ``model``: the trained network.
  - ``oracle``: copies the reference rotation geodesically nearest to the
    query's ground truth; the upper bound for template copying.
  - ``latent-nn``: copies the rotation of the reference whose encoder
    latent is nearest to the query's latent.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from app.errors import EmptyInput, InsufficientReferences
from app.schemas import EvalReport, ObjectResult, QueryError, SweepResult, TimingStats, threshold_key
from app.services import autograd as ag
from app.services.model import ModelParams, encode, onboard, predict_rotation, predict_with_bank
from app.services.so3 import fps_select, geodesic_angle, pairwise_geodesic, random_rotation, rot_x, rot_y
from app.services.synthgen import BackgroundSpec, ObjectRecord, ProceduralObject, render
from app.utils.hashing import derive_seed
from app.utils.memory import track_peak_memory
from app.utils.timing import summarize_ms, timed

logger = logging.getLogger(__name__)

METHODS = ("model", "oracle", "latent-nn")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def accuracy_at(errors: Sequence[float], threshold: float) -> float:
    """Fraction of errors <= threshold (closed boundary)."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise EmptyInput("accuracy_at needs at least one error")
    return float(np.mean(errors <= threshold))


def errors_deg(pred: NDArray, gt: NDArray) -> NDArray[np.float64]:
    return np.degrees(np.atleast_1d(geodesic_angle(pred, gt)))


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def oracle_rotations(ref_rotations: NDArray, query_rotations: NDArray) -> NDArray[np.float64]:
    """Reference rotation nearest each query's ground truth; ties -> lowest index."""
    dist = pairwise_geodesic(query_rotations, ref_rotations)
    return np.asarray(ref_rotations)[np.argmin(dist, axis=1)]


def nearest_reference_oracle(episode) -> NDArray[np.float64]:
    return oracle_rotations(episode.ref_rotations, episode.query_rotations)


def latent_nearest_neighbor(
    ref_images: NDArray,
    ref_rotations: NDArray,
    query_images: NDArray,
    params: ModelParams,
) -> NDArray[np.float64]:
    """Reference rotation whose encoder latent is L2-nearest each query's."""
    with ag.no_grad():
        refs = encode(ref_images, params).data.astype(np.float64)
        queries = encode(query_images, params).data.astype(np.float64)
    dist = np.sum((queries[:, None, :] - refs[None, :, :]) ** 2, axis=-1)
    return np.asarray(ref_rotations)[np.argmin(dist, axis=1)]


# ---------------------------------------------------------------------------
# Per-object evaluation
# ---------------------------------------------------------------------------

@dataclass
class _ObjectRun:
    result: ObjectResult
    onboarding_ms: float
    per_query_ms: float


def _evaluate_record(
    record: ObjectRecord,
    params: Optional[ModelParams],
    k_refs: int,
    thresholds: Sequence[float],
    method: str,
) -> _ObjectRun:
    ep = record.episode
    if ep.n_ref < k_refs:
        raise InsufficientReferences(f"object {ep.object_id} has {ep.n_ref} references, k={k_refs}")
    picks = fps_select(ep.ref_rotations, k_refs)
    ref_images, ref_rotations = ep.ref_images[picks], ep.ref_rotations[picks]

    onboarding_ms = 0.0
    if method == "model":
        with timed() as onboarding:
            bank = onboard(ref_images, ref_rotations, params)
        with timed() as predicting:
            pred = predict_with_bank(bank, ep.query_images, params)
        onboarding_ms = onboarding.elapsed_ms
    elif method == "oracle":
        with timed() as predicting:
            pred = oracle_rotations(ref_rotations, ep.query_rotations)
    elif method == "latent-nn":
        with timed() as predicting:
            pred = latent_nearest_neighbor(ref_images, ref_rotations, ep.query_images, params)
    else:
        raise ValueError(f"unknown method '{method}'")

    errs = errors_deg(pred, ep.query_rotations)
    result = ObjectResult(
        object_id=ep.object_id,
        errors=[QueryError(query_index=i, error_deg=float(e)) for i, e in enumerate(errs)],
        accuracy={threshold_key(t): accuracy_at(errs, t) for t in thresholds},
        mean_error=float(np.mean(errs)),
        median_error=float(np.median(errs)),
    )
    return _ObjectRun(result, onboarding_ms, predicting.elapsed_ms / len(errs))


def eval_model(
    params: Optional[ModelParams],
    records: Sequence[ObjectRecord],
    k_refs: int,
    thresholds: Sequence[float],
    method: str = "model",
    threads: int = 1,
    config_hash: Optional[str] = None,
) -> EvalReport:
    """Evaluate one predictor on every record; aggregates average over objects.

    ``peak_memory_mb`` is the traced peak of evaluating one object, taken
    in a separate untimed pass.
    """
    if not records:
        raise EmptyInput("eval_model needs at least one object")
    if method != "oracle" and params is None:
        raise ValueError(f"method '{method}' needs model parameters")

    def run(record: ObjectRecord) -> _ObjectRun:
        return _evaluate_record(record, params, k_refs, thresholds, method)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(run, records))
    else:
        runs = [run(r) for r in records]
    # Timed runs stay untraced; memory comes from one extra pass.
    with track_peak_memory() as memory:
        run(records[0])

    objects = [r.result for r in runs]
    all_errors = np.concatenate([[q.error_deg for q in o.errors] for o in objects])
    per_query = summarize_ms([r.per_query_ms for r in runs])
    report = EvalReport(
        method=method,
        k_refs=k_refs,
        thresholds=list(thresholds),
        objects=objects,
        accuracy={
            threshold_key(t): float(np.mean([o.accuracy[threshold_key(t)] for o in objects]))
            for t in thresholds
        },
        mean_error=float(np.mean([o.mean_error for o in objects])),
        median_error=float(np.median(all_errors)),
        timing=TimingStats(
            per_query_ms_mean=per_query["mean"],
            per_query_ms_p50=per_query["p50"],
            per_query_ms_p95=per_query["p95"],
            onboarding_ms_mean=float(np.mean([r.onboarding_ms for r in runs])),
        ),
        peak_memory_mb=memory.traced_peak_mb,
        config_hash=config_hash,
    )
    summary = ", ".join(f"Acc@{key} {value:.3f}" for key, value in report.accuracy.items())
    logger.info(f"{method} k={k_refs} on {len(objects)} objects: {summary}, mean error {report.mean_error:.1f} deg")
    return report


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def refcount_sweep(
    params: Optional[ModelParams],
    records: Sequence[ObjectRecord],
    ks: Sequence[int],
    thresholds: Sequence[float],
    method: str = "model",
    threads: int = 1,
) -> SweepResult:
    """Acc@threshold and mean error as a function of the reference count."""
    reports = [eval_model(params, records, k, thresholds, method=method, threads=threads) for k in ks]
    return sweep_from_reports(reports, thresholds)


def sweep_from_reports(reports: Sequence[EvalReport], thresholds: Sequence[float]) -> SweepResult:
    metrics: Dict[str, List[float]] = {
        f"acc@{threshold_key(t)}": [r.accuracy[threshold_key(t)] for r in reports] for t in thresholds
    }
    metrics["mean_error_deg"] = [r.mean_error for r in reports]
    return SweepResult(variable="k", values=[float(r.k_refs) for r in reports], metrics=metrics)


_SWEEP_AXES = {"azimuth": rot_y, "elevation": rot_x}


def separation_sweep(
    params: ModelParams,
    obj: ProceduralObject,
    gaps: Sequence[float],
    trials: int = 50,
    seed: int = 0,
    axis: str = "azimuth",
    background: Optional[BackgroundSpec] = None,
) -> SweepResult:
    """Mean error of a query placed midway between two references.

    References sit at +g and -g about a random base orientation along one
    camera axis (vertical for azimuth, horizontal for elevation); the
    query is the base orientation itself. Each trial uses the same base
    orientation for every gap.
    """
    if axis not in _SWEEP_AXES:
        raise ValueError(f"unknown sweep axis '{axis}'")
    turn = _SWEEP_AXES[axis]
    size = params.config.crop
    bases = [random_rotation(np.random.default_rng(derive_seed(seed, "separation", t))) for t in range(trials)]

    means = []
    for gap in gaps:
        g = np.radians(gap)
        errs = []
        for B in bases:
            refs = np.stack([turn(g) @ B, turn(-g) @ B])
            ref_images = np.stack([render(obj, R, size, background) for R in refs])
            query_image = render(obj, B, size, background)[None]
            pred = predict_rotation(ref_images, refs, query_image, params)
            errs.append(float(np.degrees(geodesic_angle(pred[0], B))))
        means.append(float(np.mean(errs)))
        logger.debug(f"separation {axis} gap {gap:g}: mean error {means[-1]:.2f} deg")
    return SweepResult(variable=f"{axis}_gap_deg", values=[float(g) for g in gaps], metrics={"mean_error_deg": means})


def view_directions(rotations: NDArray) -> NDArray[np.float64]:
    """Object-frame unit vector pointing at the camera for each rotation."""
    # The camera looks down -z, so the direction toward it is Rᵀ e_z.
    return np.asarray(rotations)[..., 2, :]


def coverage_probe(
    params: Optional[ModelParams],
    records: Sequence[ObjectRecord],
    k_refs: int,
    threshold: float = 15.0,
    method: str = "model",
) -> SweepResult:
    """Error for queries inside vs outside the hemisphere the references cover.

    References are the FPS picks among reference-pool views seen from the
    object's +z hemisphere. Values are +1 (inside) and -1 (outside).
    """
    inside: List[float] = []
    outside: List[float] = []
    probed = 0
    for record in records:
        ep = record.episode
        covered = np.flatnonzero(view_directions(ep.ref_rotations)[:, 2] > 0)
        if covered.size == 0:
            logger.warning(f"Skipping object {ep.object_id}: no references in the covered hemisphere")
            continue
        probed += 1
        picks = covered[fps_select(ep.ref_rotations[covered], min(k_refs, covered.size))]
        refs, ref_images = ep.ref_rotations[picks], ep.ref_images[picks]

        if method == "oracle":
            pred = oracle_rotations(refs, ep.query_rotations)
        elif method == "latent-nn":
            pred = latent_nearest_neighbor(ref_images, refs, ep.query_images, params)
        else:
            pred = predict_rotation(ref_images, refs, ep.query_images, params)
        errs = errors_deg(pred, ep.query_rotations)
        side = view_directions(ep.query_rotations)[:, 2] > 0
        inside.extend(errs[side])
        outside.extend(errs[~side])
    if not probed:
        raise InsufficientReferences("no object has references in the covered hemisphere")

    def stats(errs: List[float]) -> tuple:
        if not errs:
            return float("nan"), float("nan"), 0.0
        return float(np.mean(errs)), accuracy_at(errs, threshold), float(len(errs))

    (mi, ai, ni), (mo, ao, no) = stats(inside), stats(outside)
    return SweepResult(
        variable="hemisphere",
        values=[1.0, -1.0],
        metrics={"mean_error_deg": [mi, mo], f"acc@{threshold_key(threshold)}": [ai, ao], "count": [ni, no]},
    )
