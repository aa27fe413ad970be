"""Latency and memory benchmark.

Onboarding (encoding and rotation-embedding the references) is timed
apart from prediction, and per-query latency is the time of one
multi-query pass divided by the number of queries. Timed runs execute
with allocation tracing off; peak memory comes from one extra untimed
pass.
"""

import logging
from typing import List, Optional, Sequence

import numpy as np

from app.schemas import BenchRow
from app.services.model import ModelParams, onboard, predict_with_bank
from app.services.so3 import random_rotations
from app.services.synthgen import generate_object, render
from app.utils.hashing import derive_seed
from app.utils.memory import track_peak_memory
from app.utils.timing import summarize_ms, timed

logger = logging.getLogger(__name__)

WARMUP_RUNS = 3

BENCH_COLUMNS = list(BenchRow.model_fields)


def bench_latency(
    params: ModelParams,
    n_refs: Sequence[int],
    n_queries: int = 30,
    repeats: int = 20,
    seed: int = 0,
    config_hash: Optional[str] = None,
) -> List[BenchRow]:
    """One row per reference count, statistics over ``repeats`` timed runs."""
    size = params.config.crop
    obj = generate_object(derive_seed(seed, "bench", "object"))
    rng = np.random.default_rng(derive_seed(seed, "bench", "views"))
    rotations = random_rotations(rng, max(n_refs) + n_queries)
    images = np.stack([render(obj, R, size) for R in rotations])
    queries = images[max(n_refs):]

    rows = []
    for k in n_refs:
        ref_images, ref_rotations = images[:k], rotations[:k]
        for _ in range(WARMUP_RUNS):
            predict_with_bank(onboard(ref_images, ref_rotations, params), queries, params)

        onboarding, batch, single = [], [], []
        for _ in range(max(repeats, 1)):
            with timed() as t_onboard:
                bank = onboard(ref_images, ref_rotations, params)
            with timed() as t_batch:
                predict_with_bank(bank, queries, params)
            with timed() as t_single:
                predict_with_bank(bank, queries[:1], params)
            onboarding.append(t_onboard.elapsed_ms)
            batch.append(t_batch.elapsed_ms)
            single.append(t_single.elapsed_ms)

        with track_peak_memory() as memory:
            predict_with_bank(onboard(ref_images, ref_rotations, params), queries, params)

        per_query = summarize_ms([b / n_queries for b in batch])
        row = BenchRow(
            n_refs=k,
            n_queries=n_queries,
            onboarding_ms=summarize_ms(onboarding)["p50"],
            per_query_ms_mean=per_query["mean"],
            per_query_ms_p50=per_query["p50"],
            per_query_ms_p95=per_query["p95"],
            single_query_ms=summarize_ms(single)["p50"],
            batch_pass_ms=summarize_ms(batch)["p50"],
            peak_traced_mb=memory.traced_peak_mb,
            peak_rss_mb=memory.rss_peak_mb,
            config_hash=config_hash,
        )
        logger.info(
            f"{k} refs: onboarding {row.onboarding_ms:.2f} ms, "
            f"{row.per_query_ms_p50:.3f} ms/query, peak {row.peak_traced_mb:.1f} MB"
        )
        rows.append(row)
    return rows
