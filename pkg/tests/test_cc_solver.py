import numpy as np
import pytest

from conftest import coupled_spec, two_node_spec
from mftlab.cc_solver import SolverDiverged, decentralized_control, solve_cc
from mftlab.model import ConstraintSpec, InfoPattern, ModelSpec
from mftlab.riccati import solve_reduced_ode, solve_riccati_mf
from mftlab.stochastics import TimeGrid, make_ensemble

GRID = TimeGrid(1.0, 20)


def _ens(spec, M=2000, seed=0, grid=GRID):
    return make_ensemble(grid, M, spec.diversity, seed)


def test_zero_state_weight_kills_the_adjoints():
    spec = ModelSpec.constant(xi=1.0, A=-0.3, B=1.0, C=0.2, D=0.1, F=0.3, F_tilde=0.2, Q=0.0, H=0.0,
                              constraint=ConstraintSpec.box([-1.0], [1.0]))
    sol = solve_cc(spec, GRID, _ens(spec))
    assert sol.converged and sol.iterations <= 2
    for arr in (sol.gamma, sol.vartheta, sol.y1, sol.beta1, sol.y2, sol.control):
        assert np.all(arr == 0.0)


def test_zero_start_without_inputs_stays_at_zero():
    spec = ModelSpec.constant(xi=0.0, A=0.3, B=0.0, D=0.0, C=0.2, Q=1.0, H=0.4)
    sol = solve_cc(spec, GRID, _ens(spec))
    for arr in (sol.alpha, sol.gamma, sol.y1, sol.y2):
        assert np.all(arr == 0.0)


def test_boundary_conditions_and_invariants():
    spec = two_node_spec(A=[-1.0, -0.3], Q=0.5, H=0.2, constraint=ConstraintSpec.orthant())
    ens = _ens(spec)
    sol = solve_cc(spec, GRID, ens)
    assert sol.converged
    assert np.all(sol.alpha[:, 0] == spec.xi)
    assert np.all(sol.gamma[:, -1] == 0) and np.all(sol.y1[:, -1] == 0) and np.all(sol.y2[:, -1] == 0)
    assert np.all(sol.control >= 0.0)
    assert np.allclose(sol.mean_alpha, sol.alpha.mean(axis=0), rtol=0, atol=1e-14)
    assert sol.alpha.shape == (ens.paths, GRID.steps + 1, 1)
    assert sol.vartheta.shape == (ens.paths, GRID.steps, 1)
    assert sol.y2.shape == (2, GRID.steps + 1, 1)


def test_one_more_sweep_barely_moves_a_converged_solution():
    spec = coupled_spec()
    ens = _ens(spec)
    tol = 1e-8
    sol = solve_cc(spec, GRID, ens, tol=tol)
    again = solve_cc(spec, GRID, ens, tol=tol, max_iter=1, initial=sol)
    assert again.residual_history[0] <= 2 * tol


def test_matches_reduced_ode():
    spec = ModelSpec.constant(xi=1.0, A=0.2, B=1.0, Q=1.0, H=0.3)
    grid = TimeGrid(1.0, 50)
    sol = solve_cc(spec, grid, _ens(spec, M=5000, grid=grid))
    ref = solve_reduced_ode(spec, grid)
    assert np.max(np.abs(sol.mean_alpha - ref.mean_alpha) / ref.mean_alpha) <= 0.02


def test_trivial_information_control_is_path_independent():
    spec = coupled_spec(info=InfoPattern.trivial())
    sol = solve_cc(spec, GRID, _ens(spec))
    assert sol.converged
    assert np.max(np.ptp(sol.control, axis=0)) <= 1e-12


def test_delayed_information_converges_and_uses_only_lagged_values():
    spec = coupled_spec(info=InfoPattern.delayed(0.25))
    sol = solve_cc(spec, GRID, _ens(spec))
    assert sol.converged
    # before the delay has elapsed nothing but the node is known
    assert np.max(np.ptp(sol.control[:, :5], axis=0)) <= 1e-12


def test_damping_validation_and_divergence_flag():
    spec = two_node_spec()
    ens = _ens(spec)
    with pytest.raises(ValueError):
        solve_cc(spec, GRID, ens, damping=0.0)
    bad = solve_cc(spec, GRID, ens, max_iter=50)
    assert not bad.converged
    with pytest.raises(SolverDiverged):
        decentralized_control(bad, spec)
    good = solve_cc(spec, GRID, ens, damping=0.5)
    assert good.converged


def test_decentralized_control_examples():
    spec = ModelSpec.constant(xi=1.0, A=-0.3, B=1.0, Q=0.0)
    sol = solve_cc(spec, GRID, _ens(spec))
    field = decentralized_control(sol, spec)
    x = np.linspace(-2, 2, 7)[:, None]
    th = np.zeros(7, dtype=np.int64)
    assert np.all(field(3, x, th) == 0.0)
    # positive start and state weight: the unconstrained optimum pushes down,
    # so the orthant clamps it to 0 on positive states
    pos = ModelSpec.constant(xi=1.0, A=0.0, B=1.0, Q=1.0, constraint=ConstraintSpec.orthant())
    sol = solve_cc(pos, GRID, _ens(pos))
    f = decentralized_control(sol, pos)
    xp = np.linspace(0.5, 2.0, 5)[:, None]
    assert np.all(f(2, xp, np.zeros(5, dtype=np.int64)) == 0.0)


def test_decentralized_control_matches_riccati_feedback():
    # without noise every path follows the mean, so the feedback is checked there
    spec = ModelSpec.constant(xi=1.0, A=0.2, B=1.0, Q=1.0, H=0.3)
    grid = TimeGrid(1.0, 50)
    sol = solve_cc(spec, grid, _ens(spec, M=2000, grid=grid))
    ref = solve_reduced_ode(spec, grid)
    field = decentralized_control(sol, spec)
    th = np.zeros(1, dtype=np.int64)
    for k in (0, 10, 25, 40):
        x = ref.mean_alpha[k][None, :]
        want = -(ref.P[k, 0, 0] * x[0, 0] + ref.s[k, 0])
        assert field(k, x, th)[0, 0] == pytest.approx(want, abs=0.02)


def test_decentralized_control_matches_node_gains_under_noise():
    # D = 0 and B = R = 1: the optimal feedback is u = -(P x + s)
    spec = ModelSpec.constant(xi=1.0, A=0.2, B=1.0, C=0.3, Q=1.0, H=0.3)
    grid = TimeGrid(1.0, 50)
    sol = solve_cc(spec, grid, _ens(spec, M=5000, grid=grid))
    ref = solve_riccati_mf(spec, grid)
    field = decentralized_control(sol, spec)
    x = np.linspace(0.6, 1.4, 9)[:, None]
    th = np.zeros(9, dtype=np.int64)
    for k in (10, 25, 40):
        want = -(ref.P[k, 0, 0, 0] * x[:, 0] + ref.s[k, 0, 0])
        assert np.allclose(field(k, x, th)[:, 0], want, atol=0.03)


def test_averaged_and_nodewise_couplings_agree_for_one_node():
    spec = coupled_spec()
    ens = _ens(spec)
    a = solve_cc(spec, GRID, ens, y2_coupling="nodewise")
    b = solve_cc(spec, GRID, ens, y2_coupling="averaged")
    assert np.array_equal(a.mean_alpha, b.mean_alpha)
