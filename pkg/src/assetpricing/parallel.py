"""Order-preserving parallel map used for per-month and per-cell work."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Iterable[T], *, jobs: int = 1) -> list[R]:
    """``[fn(x) for x in items]``, evaluated on up to ``jobs`` threads.

    Results come back in input order, so downstream reductions are
    identical whatever the worker count.
    """
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))
