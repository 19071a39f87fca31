"""Ordered thread-parallel map used by every batch experiment."""

import os
from concurrent.futures import ThreadPoolExecutor


def resolve_threads(threads=None):
    """Worker count from the argument, then ``TP_THREADS``, then 1."""
    if threads is None:
        env = os.environ.get("TP_THREADS", "").strip()
        threads = int(env) if env else 1
    threads = int(threads)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    return threads


def ordered_map(fn, items, threads=None):
    """``[fn(x) for x in items]`` computed on a thread pool.

    Results come back in input order, so any reduction done afterwards is
    independent of the worker count.  Kernels release the GIL, which is what
    makes threads worthwhile here.
    """
    items = list(items)
    threads = min(resolve_threads(threads), max(len(items), 1))
    if threads == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
