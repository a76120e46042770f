"""Deterministic parallel map used for independent family members and directions."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "ELLREACH_THREADS"


def resolve_workers(requested=None) -> int:
    """Number of workers to use: ``requested`` (default 1), capped by ELLREACH_THREADS."""
    n = 1 if requested is None else max(1, int(requested))
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return n


def parallel_map(fn, items, workers=None) -> list:
    """``[fn(x) for x in items]`` evaluated on up to ``workers`` threads, in input order."""
    items = list(items)
    n = min(resolve_workers(workers), max(1, len(items)))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
