"""Time grids, seeded path ensembles and sample statistics.

Randomness is organised in counter-based substreams: the stream for
(seed, tag, index) is a Philox generator keyed by those three integers, so
any unit of work (a path, a replication) can be generated independently and
in any order.  Worker threads only change who fills which rows.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import DiversityLaw

_MASK64 = (1 << 64) - 1

# stream tags keep independent experiment families apart
TAG_PATHS = 0
TAG_POPULATION = 1
TAG_DIAGNOSTICS = 2
TAG_EQUIVALENCE = 3
TAG_MSYSTEMS = 4
TAG_FROZEN = 5


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("grid needs at least one step")
        if not self.T > 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt


def substream(seed: int, tag: int, index: int) -> np.random.Generator:
    """Generator for work unit ``index`` of family ``tag`` under ``seed``."""
    key = np.array([seed & _MASK64, ((tag & 0xFFFF) << 48) | (index & ((1 << 48) - 1))], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("MFT_THREADS", "1") or 1)
    return max(1, int(threads))


def parallel_fill(count: int, work: Callable[[int, int], None], threads: int | None = None) -> None:
    """Run ``work(start, stop)`` over contiguous chunks of ``range(count)``.

    ``work`` must write disjoint output rows; the result is then independent
    of the number of threads.
    """
    threads = resolve_threads(threads)
    if threads == 1 or count < 2:
        work(0, count)
        return
    bounds = np.linspace(0, count, min(threads, count) + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(work, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        for f in futures:
            f.result()


@dataclass(frozen=True)
class PathEnsemble:
    """Brownian increments ``dW`` (M, K) and diversity node indices ``theta`` (M,)."""

    grid: TimeGrid
    dW: np.ndarray
    theta: np.ndarray
    law: DiversityLaw
    seed: int

    @property
    def paths(self) -> int:
        return self.dW.shape[0]

    @property
    def W(self) -> np.ndarray:
        """Brownian paths on the grid, shape (M, K+1), starting at 0."""
        out = np.zeros((self.paths, self.grid.steps + 1))
        np.cumsum(self.dW, axis=1, out=out[:, 1:])
        return out


def make_ensemble(
    grid: TimeGrid, M: int, law: DiversityLaw, seed: int, threads: int | None = None, tag: int = TAG_PATHS
) -> PathEnsemble:
    """Draw ``M`` paths; path ``p`` depends only on ``(seed, tag, p)``."""
    if M < 1:
        raise ValueError("ensemble needs at least one path")
    K = grid.steps
    sq = np.sqrt(grid.dt)
    dW = np.empty((M, K))
    u = np.empty(M)

    def work(a: int, b: int) -> None:
        for p in range(a, b):
            g = substream(seed, tag, p)
            u[p] = g.random()
            dW[p] = g.standard_normal(K) * sq

    parallel_fill(M, work, threads)
    theta = law.sample_from_uniforms(u)
    return PathEnsemble(grid, dW, theta, law, seed)


def mean_and_se(values) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and standard error along the first axis."""
    v = np.asarray(values, dtype=float)
    if v.shape[0] < 2:
        raise ValueError("need at least two samples for a standard error")
    return v.mean(axis=0), v.std(axis=0, ddof=1) / np.sqrt(v.shape[0])


def loglog_slope(x, y) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])
