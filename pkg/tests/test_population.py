import numpy as np
import pytest

from conftest import coupled_solution, coupled_spec
from mftlab.cc_solver import solve_cc
from mftlab.model import ConstraintSpec, DiversityLaw, ModelError, ModelSpec
from mftlab.population import (
    centralized_oracle,
    gap_rate_verdicts,
    optimality_gap,
    simulate_population,
    variational_diagnostics,
)
from mftlab.stochastics import TimeGrid, loglog_slope, make_ensemble

GRID = TimeGrid(1.0, 20)


def _solve(spec, M=2000, seed=0, grid=GRID):
    sol = solve_cc(spec, grid, make_ensemble(grid, M, spec.diversity, seed))
    assert sol.converged
    return sol


def test_zero_weight_zero_start_stays_still():
    spec = ModelSpec.constant(xi=0.0, A=0.3, B=1.0, C=0.2, F=0.4, Q=0.0, H=0.0)
    run = simulate_population(spec, _solve(spec), 5, 4, 1)
    assert np.all(run.states == 0) and run.social_cost == 0.0


def test_population_invariants():
    law = DiversityLaw.finite([0.0, 1.0], [0.4, 0.6])
    spec = ModelSpec.constant(xi=1.0, A=[-0.5, -0.2], B=1.0, C=0.2, D=[0.1, 0.2], F=0.3, F_tilde=0.2, Q=1.0, H=0.3,
                              diversity=law, constraint=ConstraintSpec.box([-0.5], [0.2]))
    sol = _solve(spec)
    run = simulate_population(spec, sol, 6, 10, 4)
    assert np.all(run.states[:, :, 0] == spec.xi)
    assert np.allclose(run.state_average, run.states.mean(axis=1), rtol=0, atol=1e-14)
    assert np.all((run.controls >= -0.5) & (run.controls <= 0.2))
    assert run.social_cost >= -1e-12
    assert run.controls.shape == (10, 6, GRID.steps, 1)


def test_thread_count_does_not_change_results():
    spec = coupled_spec()
    sol = _solve(spec)
    a = simulate_population(spec, sol, 8, 150, 2, threads=1)
    b = simulate_population(spec, sol, 8, 150, 2, threads=3)
    assert np.array_equal(a.states, b.states)
    assert a.social_cost == b.social_cost and a.consistency_error == b.consistency_error


def test_uncoupled_average_fluctuation_shrinks_like_one_over_n():
    spec = coupled_spec(F=0.0, F_tilde=0.0)
    sol = _solve(spec)
    v = []
    for N in (4, 64):
        run = simulate_population(spec, sol, N, 400, 6, keep_paths=False)
        v.append(run.state_average[:, -1, 0].var(ddof=1))
    # ratio of variances is 16 in expectation; F-distribution with 399 dof keeps it well inside [8, 32]
    assert 8 <= v[0] / v[1] <= 32


def test_agents_are_exchangeable():
    spec = coupled_spec()
    sol = _solve(spec)
    run = simulate_population(spec, sol, 4, 2000, 9)
    xT = run.states[:, :, -1, 0] ** 2
    m, s = xT.mean(axis=0), xT.std(axis=0, ddof=1) / np.sqrt(xT.shape[0])
    assert abs(m[0] - m[-1]) <= 3 * np.hypot(s[0], s[-1])


def test_population_preconditions():
    spec = coupled_spec()
    sol = _solve(spec)
    with pytest.raises(ModelError):
        simulate_population(spec, sol, 1, 4, 0)


def test_oracle_guards():
    with pytest.raises(ModelError):
        centralized_oracle(coupled_spec(constraint=ConstraintSpec.orthant()), 2, GRID)
    with pytest.raises(ModelError):
        centralized_oracle(coupled_spec(), 300, GRID)


def test_oracle_zero_weight():
    assert centralized_oracle(coupled_spec(Q=0.0, H=0.0), 4, GRID) == 0.0


def test_gap_vanishes_without_state_weight():
    spec = coupled_spec(Q=0.0, H=0.0)
    gap, se = optimality_gap(spec, _solve(spec), 4, 32, 1, frozen_agents=512)
    assert gap == 0.0


def test_gap_near_zero_without_interaction():
    # no coupling and no mean-field cost: the decentralized law is optimal
    spec = coupled_spec(F=0.0, F_tilde=0.0, H=0.0)
    grid = TimeGrid(1.0, 50)
    sol = _solve(spec, M=10000, grid=grid)
    gap, se = optimality_gap(spec, sol, 2, 2000, 3, frozen_agents=1 << 16)
    assert -3 * se <= gap <= 3 * se + 1e-3


def test_frozen_gap_rate():
    spec, grid, sol, _ = coupled_solution()
    Ns = [8, 16, 32, 64, 128]
    fg = [simulate_population(spec, sol, N, 256, 7, keep_paths=False).frozen_gap for N in Ns]
    assert -1.4 <= loglog_slope(Ns, fg) <= -0.6


def test_zero_perturbation_gives_zero_variations():
    spec = coupled_spec()
    d = variational_diagnostics(spec, None, 6, np.zeros((GRID.steps, 1)), 1, 4, grid=GRID)
    for arr in (d.delta_x, d.x_star, d.x_star_star):
        assert np.all(arr == 0)
    assert all(v == 0 for v in d.gaps.values())


def test_uncoupled_perturbation_stays_with_its_agent():
    spec = coupled_spec(F=0.0, F_tilde=0.0)
    d = variational_diagnostics(spec, None, 6, np.ones((GRID.steps, 1)), 1, 4, grid=GRID, agent=2)
    others = np.delete(d.delta_x, 2, axis=1)
    assert np.all(others == 0) and np.all(d.x_star_star == 0)
    assert np.any(d.delta_x_i != 0)
    assert all(v == 0 for v in d.gaps.values())


def test_variations_start_at_zero():
    spec = coupled_spec()
    d = variational_diagnostics(spec, None, 5, lambda k: 0.5 * np.sin(k), 2, 4, grid=GRID)
    assert np.all(d.delta_x[:, :, 0] == 0) and np.all(d.x_star[:, :, 0] == 0)
    assert np.all(d.x_star_star_nodes[:, :, 0] == 0)


def test_gap_rate_verdicts():
    v = gap_rate_verdicts([2, 4, 8], [0.1, 0.07, 0.05], [0.01, 0.01, 0.01])
    assert v["nonnegative"] and v["nonincreasing"] and v["sqrt_bound"]
    assert v["c"] == pytest.approx(np.sqrt(2) * 0.13)
    v = gap_rate_verdicts([2, 4], [0.1, 0.2], [0.01, 0.01])
    assert not v["nonincreasing"] and not v["sqrt_bound"]
    v = gap_rate_verdicts([2, 4], [-0.1, 0.0], [0.01, 0.01])
    assert not v["nonnegative"]
