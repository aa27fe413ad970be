"""Peak-memory sampling.

numpy reports its buffers to ``tracemalloc``, so the traced peak of a
block is a good estimate of the working set of one configuration; the
process-wide resident peak is reported alongside it.
"""

import resource
import sys
import tracemalloc
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator

_MB = 1024.0 * 1024.0


@dataclass
class MemorySample:
    traced_peak_mb: float = 0.0
    rss_peak_mb: float = 0.0


def peak_rss_mb() -> float:
    """Process peak resident set size in MB."""
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # ru_maxrss is bytes on macOS, kilobytes on Linux
    if sys.platform == "darwin":
        return peak / _MB
    return peak / 1024.0


@contextmanager
def track_peak_memory() -> Iterator[MemorySample]:
    """Record the traced allocation peak and process RSS peak of a block."""
    sample = MemorySample()
    already_tracing = tracemalloc.is_tracing()
    if not already_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    try:
        yield sample
    finally:
        _, peak = tracemalloc.get_traced_memory()
        if not already_tracing:
            tracemalloc.stop()
        sample.traced_peak_mb = peak / _MB
        sample.rss_peak_mb = peak_rss_mb()
