"""Bounded per-sequence parallelism.

``MACHAN_THREADS`` caps the worker count for per-sequence forwards;
unset or 1 means fully sequential. Results are always collected in input
order, so reductions downstream see a fixed order regardless of thread
scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "MACHAN_THREADS"


def thread_count() -> int:
    raw = os.environ.get(ENV_VAR, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
    return max(1, n)


def map_indexed(fn, items: list) -> list:
    """Apply ``fn`` to every item, in-order results, threads capped by env."""
    workers = thread_count()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
