"""Shared helpers: worker-count control and delimited-output formatting."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

__all__ = ["worker_count", "map_ordered", "format_float"]


def worker_count() -> int:
    """Worker cap from the DFORGE_THREADS environment variable (default 1).

    Values below 1 fall back to 1. The pools built on top of this are
    thread based, so speedups are limited to work that releases the GIL;
    results are always reduced in submission order and therefore do not
    depend on the worker count.
    """
    raw = os.environ.get("DFORGE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def map_ordered(fn, items):
    """Map ``fn`` over ``items`` with the configured worker cap.

    Returns results in input order regardless of completion order, so the
    output is identical for any worker count.
    """
    items = list(items)
    workers = worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def format_float(x: float) -> str:
    """17 significant digits, enough to round-trip float64."""
    return f"{x:.17g}"
