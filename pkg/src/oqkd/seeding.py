"""Deterministic per-trial seeds and an order-preserving worker pool.

Trial ``i`` of a run with master seed ``s`` always draws from
``derive_seed(s, i)``, so results do not depend on how trials are spread
over workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from functools import partial

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer (Steele, Lea & Flood 2014)."""
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """64-bit seed for trial ``index``: ``splitmix64(splitmix64(master) + (index+1) * GOLDEN)``."""
    if master_seed < 0 or index < 0:
        raise ValueError("master_seed and index must be non-negative")
    return splitmix64((splitmix64(master_seed & MASK64) + (index + 1) * GOLDEN) & MASK64)


def default_workers(n_tasks: int) -> int:
    return max(1, min(os.cpu_count() or 1, n_tasks))


def _run_block(func, indices):
    return [func(i) for i in indices]


def map_indexed(func, n_tasks: int, workers: int = 1) -> list:
    """``[func(0), ..., func(n_tasks - 1)]`` evaluated on up to ``workers``
    processes.  ``func`` must be picklable (module-level function or
    ``functools.partial`` of one)."""
    workers = max(1, min(int(workers), n_tasks))
    if workers == 1:
        return [func(i) for i in range(n_tasks)]
    # contiguous blocks, a few per worker for load balance
    n_blocks = min(n_tasks, 4 * workers)
    bounds = [n_tasks * b // n_blocks for b in range(n_blocks + 1)]
    blocks = [range(bounds[b], bounds[b + 1]) for b in range(n_blocks)]
    out: list = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(partial(_run_block, func), blocks):
            out.extend(part)
    return out
