"""Deterministic chunked execution over a process pool.

Work is split into fixed-size chunks of path indices that do not depend on
the worker count, and results come back in chunk order, so the output is the
same for any number of workers.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

__all__ = ["chunk_bounds", "run_chunked"]


def chunk_bounds(n_items: int, chunk: int):
    if chunk < 1:
        raise ValueError("chunk size must be >= 1")
    return [(s, min(s + chunk, n_items)) for s in range(0, n_items, chunk)]


def _call(fn, bounds):
    return fn(*bounds)


def run_chunked(fn, n_items: int, workers: int = 1, chunk: int = 256) -> list:
    """[fn(start, stop) for each chunk], evaluated on up to ``workers`` processes."""
    if n_items < 0:
        raise ValueError("number of items must be nonnegative")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    bounds = chunk_bounds(n_items, chunk)
    if workers == 1 or len(bounds) <= 1:
        return [fn(*b) for b in bounds]
    with ProcessPoolExecutor(max_workers=min(workers, len(bounds))) as pool:
        return list(pool.map(_call, [fn] * len(bounds), bounds))
