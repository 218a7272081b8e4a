"""Order-preserving thread pool map shared by the per-scene stages."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "TRAVERSE_DA_THREADS"

_threads = None


def default_threads() -> int:
    if _threads is not None:
        return _threads
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def set_threads(n) -> None:
    global _threads
    if n is not None and int(n) < 1:
        raise ValueError("thread count must be >= 1")
    _threads = None if n is None else int(n)


def pmap(fn, items, threads=None) -> list:
    """``[fn(x) for x in items]`` evaluated on up to ``threads`` workers.

    Results come back in input order, so output never depends on the
    thread count.
    """
    items = list(items)
    n = default_threads() if threads is None else int(threads)
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
