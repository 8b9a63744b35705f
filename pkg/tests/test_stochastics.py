import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mftlab.model import DiversityLaw
from mftlab.stochastics import TimeGrid, loglog_slope, make_ensemble, mean_and_se


def test_grid():
    g = TimeGrid(2.0, 4)
    assert g.dt == 0.5
    assert g.times.tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]
    with pytest.raises(ValueError):
        TimeGrid(1.0, 0)


def test_dirac_ensemble_small():
    ens = make_ensemble(TimeGrid(1.0, 1), 3, DiversityLaw.dirac(0.0), 7)
    assert ens.dW.shape == (3, 1)
    assert ens.theta.tolist() == [0, 0, 0]
    assert ens.W[:, 0].tolist() == [0.0, 0.0, 0.0]


def test_ensemble_is_reproducible_and_thread_independent():
    law = DiversityLaw.finite([0, 1], [0.5, 0.5])
    g = TimeGrid(1.0, 10)
    a = make_ensemble(g, 500, law, 3, threads=1)
    b = make_ensemble(g, 500, law, 3, threads=4)
    assert np.array_equal(a.dW, b.dW) and np.array_equal(a.theta, b.theta)
    c = make_ensemble(g, 500, law, 4)
    assert not np.array_equal(a.dW, c.dW)


def test_path_depends_only_on_seed_and_index():
    law = DiversityLaw.dirac()
    g = TimeGrid(1.0, 5)
    small = make_ensemble(g, 10, law, 9)
    big = make_ensemble(g, 100, law, 9)
    assert np.array_equal(small.dW, big.dW[:10])


def test_empirical_node_frequency():
    M = 100_000
    ens = make_ensemble(TimeGrid(1.0, 1), M, DiversityLaw.finite([0, 1], [0.5, 0.5]), 1)
    assert abs(ens.theta.mean() - 0.5) <= 3 * np.sqrt(0.25 / M)


def test_increment_moments_and_independence():
    M, K = 20_000, 8
    g = TimeGrid(1.0, K)
    ens = make_ensemble(g, M, DiversityLaw.finite([0, 1], [0.3, 0.7]), 5)
    dt = g.dt
    assert np.all(np.abs(ens.dW.mean(axis=0)) <= 4 * np.sqrt(dt / M))
    assert np.all(np.abs(ens.dW.var(axis=0, ddof=1) - dt) <= 5 * dt * np.sqrt(2 / M))
    ind = (ens.theta == 1).astype(float)
    for k in range(K):
        assert abs(np.corrcoef(ind, ens.dW[:, k])[0, 1]) <= 4 / np.sqrt(M)


def test_ensemble_needs_paths():
    with pytest.raises(ValueError):
        make_ensemble(TimeGrid(1.0, 2), 0, DiversityLaw.dirac(), 1)


def test_mean_and_se_examples():
    m, s = mean_and_se(np.full((5, 2), 3.0))
    assert m.tolist() == [3.0, 3.0] and s.tolist() == [0.0, 0.0]
    m, s = mean_and_se([-1.0, 1.0])
    assert m == 0.0 and s == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mean_and_se([1.0])


def test_mean_and_se_clt():
    x = np.random.default_rng(0).standard_normal(10_000)
    m, s = mean_and_se(x)
    assert abs(m) <= 3 * s


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(0.1, 10))
def test_loglog_slope_recovers_power(p, c):
    x = np.array([2.0, 4.0, 8.0, 16.0])
    assert loglog_slope(x, c * x**p) == pytest.approx(p, abs=1e-9)
