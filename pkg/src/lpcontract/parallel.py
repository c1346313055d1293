"""Ordered thread-pool mapping used by the Monte Carlo engines and sweeps."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_VARS = ("LPCONTRACT_THREADS", "TOOL_THREADS")


def resolve_threads(threads: int | None = None) -> int:
    """Explicit value, else the environment fallback, else 1."""
    if threads is None:
        for var in ENV_VARS:
            raw = os.environ.get(var)
            if raw:
                try:
                    threads = int(raw)
                except ValueError:
                    raise ValueError(f"{var} must be an integer, got {raw!r}") from None
                break
    if threads is None:
        return 1
    if threads < 1:
        raise ValueError(f"thread count must be at least 1, got {threads}")
    return int(threads)


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    """``[fn(i) for i in items]`` computed on a pool; result order is input order."""
    items = list(items)
    n = resolve_threads(threads)
    if n == 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
