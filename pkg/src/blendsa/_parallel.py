"""Ordered map over independent tasks, optionally in worker processes."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def resolve_threads(threads=None) -> int:
    if threads is None:
        env = os.environ.get("BLENDSA_THREADS")
        threads = int(env) if env else 1
    return max(1, int(threads))


def pmap(fn, items, threads=None):
    """``[fn(x) for x in items]``; with threads > 1 the calls run in a
    process pool. Results keep input order, so output never depends on the
    worker count."""
    items = list(items)
    threads = resolve_threads(threads)
    if threads == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * threads))))
