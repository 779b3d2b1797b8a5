"""Path-parallel Monte Carlo driver.

Paths are cut into chunks whose size depends only on the grid and problem
dimensions, never on the worker count.  Each chunk draws the increments of
its paths from their own counter-derived seeds, steps them together, and
reduces them to per-path arrays; chunk outputs are concatenated in path
order.  Results are therefore bit-identical for any number of workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, InvalidInputError
from .integrate import BatchResult, step_batch
from .model import Problem
from .randomness import TimeGrid, derive_path_seeds, sample_increments_batch

__all__ = ["Chunk", "chunk_size_for", "run_ensemble", "raise_on_divergence"]

# state entries per chunk; bounds memory at a few tens of MB per worker
_CHUNK_BUDGET = 1 << 22


@dataclass(frozen=True)
class Chunk:
    """A stepped block of paths handed to a reducer."""

    path_index: np.ndarray
    result: BatchResult
    grid: TimeGrid


def chunk_size_for(grid: TimeGrid, r, l):
    per_path = (grid.n_steps + 1) * max(int(r), int(l))
    return int(min(8192, max(16, _CHUNK_BUDGET // per_path)))


def run_ensemble(p: Problem, epsilon, grid: TimeGrid, n_paths, master_seed, reducer, *,
                 scheme="truncated", level=None, stream_tag=0, workers=1, chunk_size=None):
    """Simulate ``n_paths`` paths and return ``reducer`` outputs concatenated in path order.

    ``reducer(chunk)`` must return a dict of arrays whose first axis runs over
    the chunk's paths.  ``scheme`` is ``"truncated"`` (needs ``level``) or ``"em"``.
    """
    n_paths = int(n_paths)
    if n_paths < 1:
        raise InvalidInputError(f"n_paths must be >= 1, got {n_paths}")
    if scheme == "truncated":
        if level is None:
            raise InvalidInputError("truncated scheme needs a truncation level")
    elif scheme == "em":
        level = None
    else:
        raise InvalidInputError(f"unknown scheme {scheme!r}; expected 'em' or 'truncated'")
    size = int(chunk_size) if chunk_size else chunk_size_for(grid, p.dim_r, p.dim_l)
    bounds = [(s, min(s + size, n_paths)) for s in range(0, n_paths, size)]

    def work(bound):
        idx = np.arange(bound[0], bound[1], dtype=np.int64)
        seeds = derive_path_seeds(master_seed, idx, stream_tag)
        dW = sample_increments_batch(grid, p.dim_l, seeds)
        res = step_batch(p, epsilon, dW, grid.dt, level=level)
        return reducer(Chunk(idx, res, grid))

    workers = max(1, int(workers))
    if workers == 1 or len(bounds) == 1:
        parts = [work(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, bounds))
    return {key: np.concatenate([part[key] for part in parts]) for key in parts[0]}


def raise_on_divergence(diverged, what="ensemble"):
    """Abort with a report naming the diverged path indices, if any."""
    bad = np.flatnonzero(diverged)
    if bad.size:
        shown = ", ".join(str(i) for i in bad[:10])
        more = f" (+{bad.size - 10} more)" if bad.size > 10 else ""
        raise DivergenceError(
            f"{what}: {bad.size} path(s) diverged, first indices: {shown}{more}", bad)
