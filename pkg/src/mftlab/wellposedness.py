"""Growth and monotonicity constants of the consistency system, the
monotonicity condition, and the discounted Picard contraction modulus.

Norms are spectral norms maximized over time cells and diversity nodes.
The consistency system is written with state ``X = alpha`` and adjoint
``Y = (gamma, y1, y2)`` stacked into 3n rows; the stacked blocks below
are the coefficient matrices of that form.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import ModelSpec, tabulate

N_K = 17
N_L = 8


@dataclass(frozen=True)
class ContractionReport:
    """Constants of the monotonicity condition and (optionally) an optimized modulus.

    ``rho1_star`` is the largest eigenvalue of ``-(A + A^T)/2`` as tabulated;
    ``rho1`` is the one-sided Lipschitz constant of the forward drift,
    ``max eig (A + A^T)/2``, which is the value the condition uses.
    ``k`` holds k_1 ... k_17 at indices 0 ... 16.
    """

    rho1_star: float
    rho1: float
    rho2_star: float
    k: np.ndarray
    norms: dict
    a4_satisfied: bool
    a4_margin: float
    a4_lhs: float
    a4_rhs: float
    rho: float | None = None
    l: np.ndarray | None = None
    modulus: float | None = None
    certified: bool | None = None
    extra: dict = field(default_factory=dict)

    def kk(self, i: int) -> float:
        """k_i with the 1-based index used in the estimates."""
        return float(self.k[i - 1])

    def to_dict(self) -> dict:
        d = {
            "rho1_star": self.rho1_star,
            "rho1": self.rho1,
            "rho2_star": self.rho2_star,
            "k": {f"k{i + 1}": float(v) for i, v in enumerate(self.k)},
            "norms": {k: float(v) for k, v in self.norms.items()},
            "a4_satisfied": bool(self.a4_satisfied),
            "a4_margin": self.a4_margin,
            "a4_lhs": self.a4_lhs,
            "a4_rhs": self.a4_rhs,
        }
        if self.modulus is not None:
            d.update(
                rho=self.rho,
                l=[float(x) for x in self.l],
                modulus=self.modulus,
                certified=bool(self.certified),
            )
        return d


def _spec_norm(mats: np.ndarray) -> float:
    if mats.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(mats.reshape(-1, *mats.shape[-2:]), ord=2, axis=(-2, -1))))


def _max_sym_eig(mats: np.ndarray, sign: float) -> float:
    m = mats.reshape(-1, *mats.shape[-2:])
    sym = sign * 0.5 * (m + np.swapaxes(m, -1, -2))
    return float(np.max(np.linalg.eigvalsh(sym)))


def stacked_blocks(spec: ModelSpec) -> dict:
    """Stacked coefficient blocks of the (X, Y, Z) form, one entry per time cell (and node)."""
    times = np.union1d(
        np.concatenate([tab.times for tab in spec.coefficients.values()] + [[spec.T]]), [0.0]
    )
    times = times[times <= spec.T]
    co = tabulate(spec, times)
    K, L = co.B.shape[0], co.A.shape[1]
    n = spec.n
    Z = np.zeros((K, n, n))
    A2 = np.concatenate([-co.Q, co.Q, Z], axis=1)
    A2bar = np.concatenate([co.M, Z, -co.M], axis=1)
    FT = np.swapaxes(co.F, 1, 2)
    FtT = np.swapaxes(co.F_tilde, 1, 2)
    CT = np.swapaxes(co.C, 1, 2)

    def blocks(rows):
        return np.concatenate([np.concatenate(r, axis=2) for r in rows], axis=1)

    B2bar = blocks([[Z, FT, Z], [Z, Z, Z], [Z, -FT, Z]])
    B2til = blocks([[Z, Z, FT], [Z, Z, Z], [Z, Z, Z]])
    C2 = blocks([[-CT, Z, Z], [Z, -CT, Z], [Z, Z, Z]])
    C2bar = blocks([[Z, FtT, Z], [Z, Z, Z], [Z, -FtT, Z]])
    B2 = np.zeros((K, L, 3 * n, 3 * n))
    for l in range(L):
        AT = np.swapaxes(co.A[:, l], 1, 2)
        B2[:, l] = blocks([[-AT, Z, Z], [Z, -AT, Z], [Z, Z, -AT - FT]])
    return dict(co=co, A2=A2, A2bar=A2bar, B2=B2, B2bar=B2bar, B2til=B2til, C2=C2, C2bar=C2bar)


def compute_constants(spec: ModelSpec) -> ContractionReport:
    """Constants k_1 ... k_17, rho_1, rho_2 and the monotonicity verdict."""
    b = stacked_blocks(spec)
    co = b["co"]
    nF = _spec_norm(co.F)
    nB = _spec_norm(co.B)
    nRi = _spec_norm(co.R_inv)
    nD = _spec_norm(co.D)
    nC = _spec_norm(co.C)
    nFt = _spec_norm(co.F_tilde)
    norms = {
        "F": nF,
        "B": nB,
        "R_inv": nRi,
        "D": nD,
        "C": nC,
        "F_tilde": nFt,
        "A2": _spec_norm(b["A2"]),
        "A2bar": _spec_norm(b["A2bar"]),
        "B2bar": _spec_norm(b["B2bar"]),
        "B2til": _spec_norm(b["B2til"]),
        "C2": _spec_norm(b["C2"]),
        "C2bar": _spec_norm(b["C2bar"]),
    }
    k = np.zeros(N_K)
    k[0] = nF
    k[2] = nB * nRi * nB
    k[4] = nB * nRi * nD
    k[5] = norms["A2"]
    k[6] = norms["A2bar"]
    k[7] = norms["B2bar"]
    k[8] = norms["B2til"]
    k[9] = norms["C2"]
    k[10] = norms["C2bar"]
    k[11] = np.sqrt(3.0) * nC
    k[12] = np.sqrt(3.0) * nFt
    k[14] = np.sqrt(6.0) * nD * nRi * nB
    k[16] = np.sqrt(6.0) * nD * nRi * nD
    # k2, k4, k14 vanish for this system; k16 has no counterpart and is 0
    rho1_star = _max_sym_eig(co.A, -1.0)
    rho1 = _max_sym_eig(co.A, +1.0)
    rho2 = _max_sym_eig(b["B2"], -1.0)
    lhs, rhs = a4_sides(rho1, rho2, norms)
    return ContractionReport(
        rho1_star=rho1_star,
        rho1=rho1,
        rho2_star=rho2,
        k=k,
        norms=norms,
        a4_satisfied=bool(rhs - lhs > 0),
        a4_margin=float(rhs - lhs),
        a4_lhs=float(lhs),
        a4_rhs=float(rhs),
    )


def a4_sides(rho1: float, rho2: float, norms: dict) -> tuple[float, float]:
    lhs = 2.0 * rho1 + 2.0 * rho2
    rhs = (
        -2.0 * norms["F"]
        - 2.0 * norms["B2bar"]
        - 2.0 * norms["B2til"]
        - norms["C2"] ** 2
        - norms["C2bar"] ** 2
        - 3.0 * norms["C"] ** 2
        - 3.0 * norms["F_tilde"] ** 2
    )
    return lhs, rhs


def check_a4(report: ContractionReport) -> tuple[bool, float]:
    """Strict monotonicity condition; returns (satisfied, right side minus left side)."""
    lhs, rhs = a4_sides(report.rho1, report.rho2_star, report.norms)
    margin = float(rhs - lhs)
    return margin > 0, margin


def contraction_modulus(report: ContractionReport, rho: float, l) -> float:
    """Bound on the squared discounted-norm ratio of two Picard images; ``inf`` when infeasible."""
    l = np.asarray(l, dtype=float)
    if l.shape != (N_L,) or np.any(l <= 0):
        raise ValueError("need eight positive weights l_1 ... l_8")
    k = report.kk
    r1, r2 = report.rho1, report.rho2_star
    rb1 = (
        rho - 2 * r1 - 2 * k(1)
        - k(2) / l[0] - k(3) / l[1] - k(4) / l[2] - k(5) / l[3]
        - k(12) ** 2 - k(13) ** 2
    )
    rb2 = (
        -rho - 2 * r2 - 2 * k(8) - 2 * k(9)
        - k(6) / l[4] - k(7) / l[5] - k(10) / l[6] - k(11) / l[7]
    )
    zc = 1.0 - k(10) * l[6] - k(11) * l[7]
    if rb1 <= 0 or rb2 <= 0 or zc <= 0:
        return float("inf")
    gy = k(2) * l[0] + k(3) * l[1] + k(14) ** 2 + k(15) ** 2
    gz = k(4) * l[2] + k(5) * l[3] + k(12) ** 2 + k(16) ** 2 + k(17) ** 2
    return float((1.0 / rb2 + 1.0 / zc) * (1.0 / rb1) * (k(6) * l[4] + k(7) * l[5]) * max(gy, gz))


def optimize_modulus(report: ContractionReport, initial: tuple | None = None) -> tuple[float, np.ndarray, float]:
    """Coordinate search for (rho, l) minimizing the modulus.

    rho is searched on [-50, 50] and each l_i on a log grid; the search is
    deterministic and, given ``initial``, never returns a value worse than
    the modulus at ``initial``.
    """
    rho_grid = np.linspace(-50.0, 50.0, 201)
    log_grid = np.linspace(-8.0, 8.0, 65)

    def f(rho, logl):
        return contraction_modulus(report, rho, np.exp(logl))

    candidates = []
    if initial is not None:
        candidates.append((float(initial[0]), np.log(np.asarray(initial[1], dtype=float))))
    for rho0 in (-10.0, 0.0, 10.0, 30.0):
        candidates.append((rho0, np.zeros(N_L)))
    best = (float("inf"), 0.0, np.zeros(N_L))
    for rho, logl in candidates:
        logl = logl.copy()
        val = f(rho, logl)
        step_r, step_l = 2.0, 1.0
        for sweep in range(60):
            improved = False
            # rho: coarse grid then local refinement
            trial = rho_grid if sweep == 0 else rho + step_r * np.linspace(-4, 4, 17)
            trial = trial[(trial >= -50.0) & (trial <= 50.0)]
            vals = np.array([f(r, logl) for r in trial])
            j = int(np.argmin(vals))
            if vals[j] < val:
                rho, val, improved = float(trial[j]), float(vals[j]), True
            for i in range(N_L):
                grid_i = log_grid if sweep == 0 else logl[i] + step_l * np.linspace(-4, 4, 17)
                vals = []
                for g in grid_i:
                    ll = logl.copy()
                    ll[i] = g
                    vals.append(f(rho, ll))
                vals = np.array(vals)
                j = int(np.argmin(vals))
                if vals[j] < val:
                    logl[i], val, improved = float(grid_i[j]), float(vals[j]), True
            if sweep > 0 and not improved:
                step_r *= 0.5
                step_l *= 0.5
                if step_l < 1e-6:
                    break
        if val < best[0]:
            best = (val, rho, logl.copy())
    return best[1], np.exp(best[2]), best[0]


def report_with_modulus(spec: ModelSpec) -> ContractionReport:
    rep = compute_constants(spec)
    rho, l, q = optimize_modulus(rep)
    return replace(rep, rho=rho, l=l, modulus=q, certified=bool(q < 1))
