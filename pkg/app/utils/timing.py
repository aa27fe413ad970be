"""Wall-clock helpers and summary statistics for latency measurements."""

import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


@dataclass
class Stopwatch:
    """Elapsed time of a ``timed()`` block, in milliseconds."""
    elapsed_ms: float = 0.0


@contextmanager
def timed() -> Iterator[Stopwatch]:
    """Measure the wall time of a ``with`` block using ``perf_counter``."""
    watch = Stopwatch()
    start = time.perf_counter()
    try:
        yield watch
    finally:
        watch.elapsed_ms = (time.perf_counter() - start) * 1000.0


def summarize_ms(samples: Sequence[float]) -> dict:
    """Mean / p50 / p95 of a list of millisecond samples."""
    if not samples:
        return {"mean": 0.0, "p50": 0.0, "p95": 0.0}
    arr = np.asarray(samples, dtype=np.float64)
    return {
        "mean": float(arr.mean()),
        "p50": float(np.percentile(arr, 50)),
        "p95": float(np.percentile(arr, 95)),
    }
