import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from mftlab.model import ConstraintSpec, DiversityLaw, InfoPattern, ModelError
from mftlab.projections import (
    ConditionalExpectationEstimator,
    WeightedProjection,
    condition,
    group_regression,
    project_batch,
    project_gamma,
)
from mftlab.stochastics import TimeGrid, make_ensemble


def test_full_space_is_identity():
    p = WeightedProjection(np.array([[2.0, 0.5], [0.5, 1.0]]), ConstraintSpec.full())
    v = np.array([-3.0, 7.0])
    assert np.array_equal(project_gamma(p, v), v)


def test_orthant_clamp():
    p = WeightedProjection(np.eye(1), ConstraintSpec.orthant())
    assert project_gamma(p, [-2.0]).tolist() == [0.0]


def test_box_example_against_grid_search():
    R = np.diag([1.0, 4.0])
    p = WeightedProjection(R, ConstraintSpec.box([-1.0, -1.0], [1.0, 1.0]))
    v = np.array([3.0, 0.5])
    g = np.linspace(-1.0, 1.0, 401)
    W = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    d = W - v
    best = W[np.argmin(np.einsum("pi,ij,pj->p", d, R, d))]
    assert np.allclose(best, [1.0, 0.5])
    assert np.allclose(project_gamma(p, v), best, atol=1e-12)


def test_rejects_indefinite_weight():
    with pytest.raises(ModelError):
        WeightedProjection(np.zeros((1, 1)), ConstraintSpec.full())


def _spd(seed, m):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((m, m))
    return G @ G.T + 0.2 * np.eye(m), rng


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), m=st.integers(2, 4))
def test_box_projection_matches_bounded_minimizer(seed, m):
    R, rng = _spd(seed, m)
    lo = rng.uniform(-1.5, 0.0, m)
    hi = lo + rng.uniform(0.2, 2.0, m)
    p = WeightedProjection(R, ConstraintSpec.box(lo, hi))
    v = 3.0 * rng.standard_normal(m)
    w = project_gamma(p, v)
    res = minimize(lambda x: (x - v) @ R @ (x - v), np.clip(v, lo, hi), jac=lambda x: 2 * R @ (x - v),
                   method="L-BFGS-B", bounds=list(zip(lo, hi)), options={"ftol": 1e-15, "gtol": 1e-12})
    f = lambda x: (x - v) @ R @ (x - v)
    assert np.all(w >= lo) and np.all(w <= hi)
    assert f(w) <= f(res.x) + 1e-9 * (1 + f(res.x))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), m=st.integers(1, 4), kind=st.sampled_from(["orthant", "box"]))
def test_projection_axioms(seed, m, kind):
    R, rng = _spd(seed, m)
    c = ConstraintSpec.orthant() if kind == "orthant" else ConstraintSpec.box(-np.ones(m), 0.5 * np.ones(m))
    p = WeightedProjection(R, c)
    V = 3.0 * rng.standard_normal((20, m))
    P = project_batch(p, V)
    assert np.array_equal(project_batch(p, P), P)
    assert np.all(c.contains(P, atol=0.0))
    d = P[1:] - P[:-1]
    e = V[1:] - V[:-1]
    lhs = np.sqrt(np.einsum("pi,ij,pj->p", d, R, d))
    rhs = np.sqrt(np.einsum("pi,ij,pj->p", e, R, e))
    assert np.all(lhs <= rhs + 1e-10)
    lo, hi = c.bounds(m)
    W = rng.uniform(lo, np.where(np.isfinite(hi), hi, 5.0), size=(30, m))
    for pv, v in zip(P, V):
        assert np.all((W - pv) @ (R @ (pv - v)) >= -1e-10)


def test_batch_matches_single():
    R, rng = _spd(3, 3)
    p = WeightedProjection(R, ConstraintSpec.box(-np.ones(3), np.ones(3)))
    V = 2 * rng.standard_normal((50, 3))
    P = project_batch(p, V)
    for i in range(50):
        assert np.array_equal(P[i], project_gamma(p, V[i]))


# --------------------------------------------------------------------------
# conditional expectation
# --------------------------------------------------------------------------


def _ens(M=400, K=10, law=None, seed=0):
    law = law or DiversityLaw.finite([0, 1], [0.5, 0.5])
    return make_ensemble(TimeGrid(1.0, K), M, law, seed)


def test_full_information_is_identity():
    ens = _ens()
    vals = np.random.default_rng(1).standard_normal((ens.paths, 2))
    out = condition(ConditionalExpectationEstimator(InfoPattern.full()), ens, 3, vals)
    assert np.array_equal(out, vals)


def test_trivial_information_is_the_mean():
    ens = _ens(M=2, law=DiversityLaw.dirac())
    out = condition(ConditionalExpectationEstimator(InfoPattern.trivial()), ens, 1, np.array([2.0, 4.0]))
    assert out.ravel().tolist() == [3.0, 3.0]


def test_delay_of_whole_horizon_gives_group_means():
    ens = _ens(M=200)
    vals = np.where(ens.theta == 0, 0.0, 5.0)
    est = ConditionalExpectationEstimator(InfoPattern.delayed(1.0))
    out = condition(est, ens, 10, vals).ravel()
    assert np.allclose(out[ens.theta == 0], 0.0, atol=1e-12)
    assert np.allclose(out[ens.theta == 1], 5.0, atol=1e-12)


def test_delayed_regression_reproduces_quadratics_of_the_lagged_value():
    ens = _ens(M=500, K=10)
    est = ConditionalExpectationEstimator(InfoPattern.delayed(0.3))
    w = ens.W[:, 7 - 3]
    target = 1.0 + 2.0 * w - 0.5 * w**2 + 3.0 * ens.theta
    out = condition(est, ens, 7, target).ravel()
    assert np.allclose(out, target, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_condition_is_linear_and_keeps_means(seed, a, b):
    ens = _ens(M=300, seed=seed % 1000)
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, ens.paths, 1))
    for pat in (InfoPattern.trivial(), InfoPattern.delayed(0.4)):
        est = ConditionalExpectationEstimator(pat)
        lhs = condition(est, ens, 8, a * x + b * y)
        rhs = a * condition(est, ens, 8, x) + b * condition(est, ens, 8, y)
        assert np.allclose(lhs, rhs, atol=1e-10)
        assert condition(est, ens, 8, x).mean() == pytest.approx(x.mean(), abs=1e-12)


def test_tower_property():
    ens = _ens(M=5000, K=10, seed=4)
    rng = np.random.default_rng(4)
    vals = ens.W[:, 9] ** 2 + rng.standard_normal(ens.paths)
    inner = condition(ConditionalExpectationEstimator(InfoPattern.delayed(0.2)), ens, 9, vals)
    outer = condition(ConditionalExpectationEstimator(InfoPattern.trivial()), ens, 9, inner)
    direct = condition(ConditionalExpectationEstimator(InfoPattern.trivial()), ens, 9, vals)
    se = vals.std(ddof=1) / np.sqrt(ens.paths)
    assert np.all(np.abs(outer - direct) <= 3 * se)


def test_underdetermined_regression_raises():
    X = np.column_stack([np.ones(2), np.arange(2.0), np.arange(2.0) ** 2])
    with pytest.raises(ModelError, match="underdetermined"):
        group_regression(X, np.zeros(2, dtype=np.int64), 1, np.ones((2, 1)))


def test_group_regression_constant_column_is_dropped():
    X = np.column_stack([np.ones(10), np.full(10, 2.0)])
    y = np.arange(10.0)[:, None]
    fit, gf = group_regression(X, np.zeros(10, dtype=np.int64), 1, y)
    assert np.allclose(fit, 4.5)
    assert np.allclose(gf.evaluate(X, np.zeros(10, dtype=np.int64)), 4.5)
