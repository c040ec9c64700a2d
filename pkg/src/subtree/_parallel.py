"""Process-pool map used by the bootstrap and the simulation drivers."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

ENV_THREADS = "SUBTREE_THREADS"


def resolve_threads(requested=None):
    """Worker count: ``SUBTREE_THREADS`` if set, else ``requested``, else all cores."""
    env = os.environ.get(ENV_THREADS)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ValueError(f"{ENV_THREADS} must be an integer, got {env!r}") from None
    elif requested is not None:
        value = int(requested)
    else:
        value = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    if value < 1:
        raise ValueError("thread count must be >= 1")
    return value


def pmap(func, items, threads=1, chunksize=None):
    """``[func(x) for x in items]``, in order, over ``threads`` processes."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [func(x) for x in items]
    if chunksize is None:
        chunksize = max(1, len(items) // (4 * threads))
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(func, items, chunksize=chunksize))
