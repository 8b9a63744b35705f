import functools
import time

import numpy as np
import pytest

from mftlab.cc_solver import solve_cc
from mftlab.model import DiversityLaw, ModelSpec
from mftlab.stochastics import TimeGrid, make_ensemble

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def coupled_spec(**over) -> ModelSpec:
    """Homogeneous scalar instance with state coupling in drift and diffusion."""
    kw = dict(n=1, m=1, T=1.0, xi=1.0, A=-0.5, B=1.0, C=0.2, D=0.2, F=1.0, F_tilde=0.5, Q=2.0, H=0.8, R=1.0)
    kw.update(over)
    return ModelSpec.constant(**kw)


def two_node_spec(**over) -> ModelSpec:
    """Scalar instance with two diversity nodes of masses 0.3 / 0.7."""
    kw = dict(
        n=1, m=1, T=1.0, xi=1.0, A=[-1.0, 0.5], B=1.0, C=0.3, D=[0.2, 0.5], F=0.4, F_tilde=0.3,
        Q=1.0, H=0.5, R=1.0, diversity=DiversityLaw.finite([0.0, 1.0], [0.3, 0.7]),
    )
    kw.update(over)
    return ModelSpec.constant(**kw)


@functools.lru_cache(maxsize=None)
def coupled_solution(steps: int = 50, paths: int = 20000, seed: int = 1):
    """(spec, grid, solution, seconds spent solving) for the coupled fixture; cached per session."""
    spec = coupled_spec()
    grid = TimeGrid(1.0, steps)
    t0 = time.perf_counter()
    ens = make_ensemble(grid, paths, spec.diversity, seed)
    sol = solve_cc(spec, grid, ens)
    return spec, grid, sol, time.perf_counter() - t0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
