import os
import subprocess
import sys

import numpy as np
import pytest

from mftlab import _pykernels, kernels

try:
    from mftlab import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")


def _spd(rng, m):
    G = rng.standard_normal((m, m))
    return G @ G.T + m * np.eye(m)


@needs_ext
def test_box_projection_parity(rng):
    for m in (1, 2, 4):
        R = _spd(rng, m)
        lo, hi = -np.ones(m), 0.5 * np.ones(m)
        V = 2 * rng.standard_normal((500, m))
        a = _pykernels.project_box_batch(V, R, lo, hi)
        b = _ckernels.project_box_batch(V, R, lo, hi)
        np.testing.assert_allclose(a, b, atol=1e-12)


@needs_ext
def test_euler_step_parity(rng):
    n, L, M = 3, 2, 400
    x = rng.standard_normal((M, n))
    node = rng.integers(0, L, M)
    A = rng.standard_normal((L, n, n))
    C = rng.standard_normal((n, n))
    drift, diff = rng.standard_normal((M, n)), rng.standard_normal((M, n))
    dw = rng.standard_normal(M)
    a = _pykernels.euler_step(x, node, A, C, drift, diff, 0.01, dw)
    b = _ckernels.euler_step(x, node, A, C, drift, diff, 0.01, dw)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-14)


def test_dispatch_matches_import():
    assert kernels.BACKEND == ("python" if _ckernels is None or os.environ.get("MFTLAB_PURE_PYTHON") == "1" else "cython")


def test_pure_python_switch():
    code = "import mftlab.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, MFTLAB_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_fallback_solver_agrees(tmp_path):
    # the same small solve under both backends gives the same states to rounding
    code = (
        "import sys; sys.path.insert(0, %r)\n"
        "from conftest import coupled_spec\n"
        "from mftlab import solve_cc, make_ensemble\n"
        "from mftlab.stochastics import TimeGrid\n"
        "spec, grid = coupled_spec(), TimeGrid(1.0, 10)\n"
        "s = solve_cc(spec, grid, make_ensemble(grid, 2000, spec.diversity, 3))\n"
        "print(repr(float(s.alpha[:, -1].mean())))\n"
    ) % os.path.dirname(__file__)
    vals = []
    for flag in ("0", "1"):
        env = dict(os.environ, MFTLAB_PURE_PYTHON=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        vals.append(float(out.stdout.strip().splitlines()[-1]))
    assert abs(vals[0] - vals[1]) <= 1e-10 * abs(vals[0])
