import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from mftlab.model import ModelSpec
from mftlab.wellposedness import (
    check_a4,
    compute_constants,
    contraction_modulus,
    optimize_modulus,
    report_with_modulus,
)


def test_rho1_for_scalar_drift():
    rep = compute_constants(ModelSpec.constant(A=-2.0, Q=1.0))
    assert rep.rho1_star == pytest.approx(2.0)
    assert rep.rho1 == pytest.approx(-2.0)


def test_k12_scales_diffusion_norm():
    rep = compute_constants(ModelSpec.constant(C=0.5, Q=1.0))
    assert rep.kk(12) == pytest.approx(0.8660254037844386, abs=1e-15)


def test_zero_control_channels_zero_constants():
    rep = compute_constants(ModelSpec.constant(A=0.3, C=0.2, F=0.1, Q=1.0, B=0.0, D=0.0))
    for i in (3, 5, 15, 17):
        assert rep.kk(i) == 0.0
    assert np.all(rep.k >= 0)


def test_condition_is_strict():
    rep = compute_constants(ModelSpec.constant(Q=1.0, R=1.0))
    assert rep.a4_lhs == 0.0 and rep.a4_rhs == 0.0
    assert check_a4(rep) == (False, 0.0)
    assert not rep.a4_satisfied


def test_identity_coupling_violates():
    ok, margin = check_a4(compute_constants(ModelSpec.constant(n=2, xi=[1, 1], B=[[1.0], [0.0]], F=np.eye(2), Q=np.eye(2))))
    assert not ok and margin < -2


def test_dissipative_margin():
    e = 1e-3
    ok, margin = check_a4(compute_constants(ModelSpec.constant(A=-10.0, B=1.0, C=e, D=e, F=e, F_tilde=e, Q=1.0)))
    assert ok and margin == pytest.approx(40, abs=0.05)


def _decoupled():
    # only the state cost and the drift: the forward map ignores the adjoints
    return ModelSpec.constant(A=-1.0, B=0.0, D=0.0, C=0.0, F=0.0, F_tilde=0.0, Q=1.0, H=0.2)


def test_modulus_vanishes_when_forward_map_ignores_adjoints():
    rep = compute_constants(_decoupled())
    assert contraction_modulus(rep, 0.0, np.ones(8)) == 0.0
    rho, l, q = optimize_modulus(rep)
    assert q == 0.0


def test_modulus_vanishes_when_backward_map_ignores_state():
    rep = compute_constants(ModelSpec.constant(A=-1.0, B=1.0, D=0.3, C=0.2, Q=0.0, H=0.0))
    assert rep.kk(6) == 0.0 and rep.kk(7) == 0.0
    assert contraction_modulus(rep, 0.0, np.ones(8)) == 0.0


def _mp_modulus(k, r1, r2, rho, l):
    """The appendix bound evaluated independently in 40-digit arithmetic."""
    mpmath.mp.dps = 40
    k = [None] + [mpmath.mpf(float(x)) for x in k]
    l = [None] + [mpmath.mpf(float(x)) for x in l]
    rho, r1, r2 = (mpmath.mpf(float(x)) for x in (rho, r1, r2))
    rb1 = rho - 2 * r1 - 2 * k[1] - k[2] / l[1] - k[3] / l[2] - k[4] / l[3] - k[5] / l[4] - k[12] ** 2 - k[13] ** 2
    rb2 = -rho - 2 * r2 - 2 * k[8] - 2 * k[9] - k[6] / l[5] - k[7] / l[6] - k[10] / l[7] - k[11] / l[8]
    zc = 1 - k[10] * l[7] - k[11] * l[8]
    if rb1 <= 0 or rb2 <= 0 or zc <= 0:
        return mpmath.inf
    gy = k[2] * l[1] + k[3] * l[2] + k[14] ** 2 + k[15] ** 2
    gz = k[4] * l[3] + k[5] * l[4] + k[12] ** 2 + k[16] ** 2 + k[17] ** 2
    return (1 / rb2 + 1 / zc) * (1 / rb1) * (k[6] * l[5] + k[7] * l[6]) * max(gy, gz)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), rho=st.floats(-40, 40))
def test_modulus_matches_high_precision_evaluation(seed, rho):
    rng = np.random.default_rng(seed)
    spec = ModelSpec.constant(A=-5.0 - 5 * rng.random(), B=rng.random(), C=0.1 * rng.random(), D=0.1 * rng.random(),
                              F=0.1 * rng.random(), F_tilde=0.1 * rng.random(), Q=1.0, H=0.3)
    rep = compute_constants(spec)
    l = np.exp(rng.uniform(-3, 3, 8)) * np.array([1, 1, 1, 1, 1, 1, 0.1, 0.1])
    got = contraction_modulus(rep, rho, l)
    want = _mp_modulus(rep.k, rep.rho1, rep.rho2_star, rho, l)
    if want == mpmath.inf:
        assert got == float("inf")
    else:
        assert got == pytest.approx(float(want), rel=1e-12, abs=1e-300)


def test_dissipative_instance_is_certified():
    e = 1e-3
    rep = report_with_modulus(ModelSpec.constant(A=-10.0, B=1.0, C=e, D=e, F=e, F_tilde=e, Q=1.0, H=0.3))
    assert rep.certified and rep.modulus < 1
    assert contraction_modulus(rep, rep.rho, rep.l) == rep.modulus


def test_strong_coupling_may_lack_certificate():
    rep = report_with_modulus(ModelSpec.constant(n=1, A=0.0, B=1.0, F=1.0, Q=1.0))
    assert rep.modulus >= 0
    assert rep.certified == (rep.modulus < 1)


def test_modulus_rejects_bad_weights():
    rep = compute_constants(_decoupled())
    with pytest.raises(ValueError):
        contraction_modulus(rep, 1.0, np.ones(7))
    with pytest.raises(ValueError):
        contraction_modulus(rep, 1.0, -np.ones(8))


@settings(max_examples=6, deadline=None)
@given(seed=st.integers(0, 2**31), s=st.floats(0.05, 0.95))
def test_scaling_couplings_down_never_hurts(seed, s):
    # F is kept positive semidefinite: the drift block of the adjoint system
    # contains -A - F, so shrinking an indefinite F can raise its eigenvalues
    rng = np.random.default_rng(seed)
    base = dict(A=-8.0, Q=1.0, H=0.3)
    c = dict(B=rng.random(), C=0.2 * rng.random(), D=0.2 * rng.random(), F=0.2 * rng.random(), F_tilde=0.2 * rng.random())
    rep = compute_constants(ModelSpec.constant(**base, **c))
    rep_s = compute_constants(ModelSpec.constant(**base, **{k: s * v for k, v in c.items()}))
    assert np.all(rep_s.k <= rep.k + 1e-15)
    rho, l, q = optimize_modulus(rep)
    _, _, q_s = optimize_modulus(rep_s, initial=(rho, l))
    assert q_s <= q * (1 + 1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_condition_is_orthogonally_invariant(seed):
    rng = np.random.default_rng(seed)
    n = 3
    U = ortho_group.rvs(n, random_state=seed)
    mats = {k: rng.standard_normal((n, n)) * 0.3 for k in ("A", "C", "F", "F_tilde")}
    mats["A"] -= 3 * np.eye(n)
    vec = {"B": rng.standard_normal((n, 1)), "D": rng.standard_normal((n, 1))}
    G = rng.standard_normal((n, n))
    sym = {"Q": G @ G.T, "H": np.eye(n) * 0.5}
    spec = ModelSpec.constant(n=n, xi=np.ones(n), **mats, **vec, **sym)
    rot = ModelSpec.constant(
        n=n, xi=U.T @ np.ones(n),
        **{k: U.T @ v @ U for k, v in {**mats, **sym}.items()},
        **{k: U.T @ v for k, v in vec.items()},
    )
    a, b = check_a4(compute_constants(spec)), check_a4(compute_constants(rot))
    assert b[1] == pytest.approx(a[1], rel=1e-10, abs=1e-10)
