"""Row-partitioned thread parallelism.

Kernels are numba functions compiled with ``nogil=True``; each worker owns a
contiguous slice of output rows, so results never depend on the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

THREADS_ENV = "ICONS_THREADS"


def worker_count(requested: Optional[int] = None) -> int:
    """Resolve the number of workers, capped by ``ICONS_THREADS`` if set."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return max(1, int(n))


def run_row_chunks(
    fn: Callable[[int, int], None], n_rows: int, n_workers: Optional[int] = None
) -> None:
    """Call ``fn(start, stop)`` over a partition of ``range(n_rows)``."""
    workers = min(worker_count(n_workers), max(n_rows, 1))
    if workers <= 1 or n_rows < 2:
        fn(0, n_rows)
        return
    bounds = [n_rows * w // workers for w in range(workers + 1)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(fn, lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo
        ]
        for fut in futures:
            fut.result()
