"""Deterministic oracles for the unconstrained, full-information problem.

* ``solve_reduced_ode``: drift-only homogeneous mean equations decoupled by
  a backward Riccati equation.
* ``solve_riccati_mf``: per-node stochastic Riccati gains for the linear
  consistency system with finite diversity, plus the deterministic
  mean/offset curves solved as a linear two-point problem by shooting.
* ``stacked_riccati_value``: the centralized N-agent stochastic LQ value,
  either for the continuous-time problem or exactly for the Euler scheme.

Continuous-time curves are integrated piecewise over the coefficient
breakpoints with a high-order adaptive integrator and sampled on the grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .model import CellCoefficients, ModelError, ModelSpec, tabulate
from .stochastics import TimeGrid

RTOL = 1e-12
ATOL = 1e-13
BLOWUP = 1e10


class RiccatiBlowUp(ModelError):
    """The Riccati solution left every reasonable bound on [0, T]."""


# --------------------------------------------------------------------------
# piecewise integration helpers
# --------------------------------------------------------------------------


def _segments(spec: ModelSpec) -> np.ndarray:
    pts = {0.0, spec.T}
    for tab in spec.coefficients.values():
        pts.update(float(t) for t in tab.times if 0.0 < t < spec.T)
    return np.array(sorted(pts))


def _cell(spec: ModelSpec, a: float, b: float) -> CellCoefficients:
    return tabulate(spec, np.array([a, b]))


class PiecewiseDense:
    """Dense output assembled from per-segment ``solve_ivp`` solutions."""

    def __init__(self):
        self.pieces: list[tuple[float, float, object]] = []

    def add(self, a: float, b: float, sol) -> None:
        self.pieces.append((min(a, b), max(a, b), sol))

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = None
        for k, tk in enumerate(t):
            for a, b, sol in self.pieces:
                if a - 1e-14 <= tk <= b + 1e-14:
                    val = sol(min(max(tk, a), b))
                    break
            else:
                raise ValueError(f"t={tk} outside the integrated range")
            if out is None:
                out = np.empty((t.size, val.size))
            out[k] = val
        return out


def _integrate(rhs_factory, y0, segments, backward: bool, spec: ModelSpec, what: str) -> PiecewiseDense:
    dense = PiecewiseDense()
    order = range(len(segments) - 1)
    if backward:
        order = reversed(list(order))
    y = np.asarray(y0, dtype=float)
    for s in order:
        a, b = segments[s], segments[s + 1]
        co = _cell(spec, a, b)
        rhs = rhs_factory(co)
        t0, t1 = (b, a) if backward else (a, b)

        def blow(t, z):
            return BLOWUP - np.max(np.abs(z))

        blow.terminal = True
        res = solve_ivp(rhs, (t0, t1), y, method="DOP853", rtol=RTOL, atol=ATOL, dense_output=True, events=blow)
        if res.status != 0 or not np.all(np.isfinite(res.y)):
            raise RiccatiBlowUp(f"{what} blows up near t={res.t[-1]:.6g}")
        dense.add(a, b, res.sol)
        y = res.y[:, -1]
    return dense


# --------------------------------------------------------------------------
# drift-only homogeneous reduction
# --------------------------------------------------------------------------


@dataclass
class ReducedODESolution:
    """Mean curves of the drift-only homogeneous system and its decoupling data.

    ``Pi`` decouples the means (``mean_gamma = Pi mean_alpha``).  ``P`` and
    ``s`` decouple the pathwise adjoint, ``gamma = P alpha + s``, which gives
    the feedback ``u = -R^{-1} B^T (P x + s)``.
    """

    times: np.ndarray
    mean_alpha: np.ndarray
    mean_gamma: np.ndarray
    Pi: np.ndarray
    P: np.ndarray
    s: np.ndarray
    dense_means: PiecewiseDense
    dense_gains: PiecewiseDense
    dense_offset: PiecewiseDense

    def feedback(self, k: int, x: np.ndarray, R_inv: np.ndarray, B: np.ndarray) -> np.ndarray:
        return -(x @ self.P[k].T + self.s[k]) @ (R_inv @ B.T).T


def _check_reduced(spec: ModelSpec) -> None:
    co = spec.coefficients
    for name in ("C", "D", "F", "F_tilde"):
        if np.any(co[name].values != 0):
            raise ModelError(f"reduced ODE needs {name} = 0")
    if spec.constraint.kind != "full" or spec.info.kind != "full":
        raise ModelError("reduced ODE needs unconstrained controls and full information")
    if spec.diversity.kind != "dirac":
        raise ModelError("reduced ODE needs a Dirac diversity law")


def solve_reduced_ode(spec: ModelSpec, grid: TimeGrid) -> ReducedODESolution:
    """Mean curves of the homogeneous drift-only system on ``grid``."""
    _check_reduced(spec)
    n = spec.n
    seg = _segments(spec)

    def gains(co):
        A, S = co.A[0, 0], co.B[0] @ co.R_inv[0] @ co.B[0].T
        Qw = co.Q[0] - co.M[0]  # (I - H) Q (I - H)

        def f(t, z):
            Pi = z[: n * n].reshape(n, n)
            P = z[n * n :].reshape(n, n)
            dPi = -Pi @ A - A.T @ Pi + Pi @ S @ Pi - Qw
            dP = -P @ A - A.T @ P + P @ S @ P - co.Q[0]
            return np.concatenate([dPi.ravel(), dP.ravel()])

        return f

    g = _integrate(gains, np.zeros(2 * n * n), seg, True, spec, "Riccati equation")

    def means(co):
        A, S = co.A[0, 0], co.B[0] @ co.R_inv[0] @ co.B[0].T

        def f(t, z):
            Pi = g(t)[0, : n * n].reshape(n, n)
            return (A - S @ Pi) @ z

        return f

    mdense = _integrate(means, spec.xi, seg, False, spec, "mean equation")

    def offset(co):
        A, S, Mh = co.A[0, 0], co.B[0] @ co.R_inv[0] @ co.B[0].T, co.M[0]

        def f(t, z):
            P = g(t)[0, n * n :].reshape(n, n)
            return P @ S @ z - A.T @ z + Mh @ mdense(t)[0]

        return f

    sdense = _integrate(offset, np.zeros(n), seg, True, spec, "offset equation")
    t = grid.times
    gv = g(t)
    Pi = gv[:, : n * n].reshape(-1, n, n)
    P = gv[:, n * n :].reshape(-1, n, n)
    ma = mdense(t)
    return ReducedODESolution(
        times=t,
        mean_alpha=ma,
        mean_gamma=np.einsum("kij,kj->ki", Pi, ma),
        Pi=Pi,
        P=P,
        s=sdense(t),
        dense_means=mdense,
        dense_gains=g,
        dense_offset=sdense,
    )


# --------------------------------------------------------------------------
# finite diversity, linear consistency system
# --------------------------------------------------------------------------


@dataclass
class RiccatiMFSolution:
    """Per-node decoupling of the unconstrained linear consistency system.

    Pathwise: ``gamma = P_l alpha + s_l`` and ``y1 = P1_l alpha + s1_l`` on
    node ``l``; the optimal control is ``u = Kx_l alpha + Ks_l s_l + Kbar_l xbar``.
    Shapes: gains (K+1, L, n, n); curves (K+1, L, n).
    """

    times: np.ndarray
    P: np.ndarray
    P1: np.ndarray
    node_mean_alpha: np.ndarray
    s: np.ndarray
    s1: np.ndarray
    y2: np.ndarray
    mean_alpha: np.ndarray
    node_mean_gamma: np.ndarray
    mean_gamma: np.ndarray
    mean_y1: np.ndarray
    mean_beta1: np.ndarray
    weights: np.ndarray
    state: object  # callable t -> (node means, s, s1, y2) flattened
    gains: object  # callable t -> (P, P1) flattened
    y2_coupling: str = "nodewise"


def _node_gains(co: CellCoefficients, P: np.ndarray, l: int):
    A, D = co.A[0, l], co.D[0, l]
    B, C, Ft, R = co.B[0], co.C[0], co.F_tilde[0], co.R[0]
    Sig = R + D.T @ P @ D
    Si = np.linalg.inv(Sig)
    G = P @ B + C.T @ P @ D
    Kx = -Si @ G.T
    Ks = -Si @ B.T
    Kb = -Si @ D.T @ P @ Ft
    return A, D, B, C, Ft, Si, G, Kx, Ks, Kb


def solve_riccati_mf(spec: ModelSpec, grid: TimeGrid, y2_coupling: str = "nodewise") -> RiccatiMFSolution:
    """Decouple the unconstrained full-information consistency system with finite diversity."""
    if spec.constraint.kind != "full" or spec.info.kind != "full":
        raise ModelError("Riccati oracle needs unconstrained controls and full information")
    n, L = spec.n, spec.diversity.n_nodes
    w = spec.diversity.weights
    seg = _segments(spec)
    nn = n * n

    def riccati(co):
        def f(t, z):
            out = np.empty_like(z)
            for l in range(L):
                P = z[l * nn : (l + 1) * nn].reshape(n, n)
                P1 = z[(L + l) * nn : (L + l + 1) * nn].reshape(n, n)
                A, D, B, C, Ft, Si, G, Kx, Ks, Kb = _node_gains(co, P, l)
                Q = co.Q[0]
                dP = -(P @ A + A.T @ P + C.T @ P @ C + Q) + G @ Si @ G.T
                dP1 = -P1 @ (A + B @ Kx) - A.T @ P1 - C.T @ P1 @ (C + D @ Kx) + Q
                out[l * nn : (l + 1) * nn] = dP.ravel()
                out[(L + l) * nn : (L + l + 1) * nn] = dP1.ravel()
            return out

        return f

    gd = _integrate(riccati, np.zeros(2 * L * nn), seg, True, spec, "stochastic Riccati equation")

    def unpack_gains(t):
        z = gd(t)[0]
        P = z[: L * nn].reshape(L, n, n)
        P1 = z[L * nn :].reshape(L, n, n)
        return P, P1

    dim = 4 * n * L  # node means, s, s1, y2

    def linear_map(co, t) -> np.ndarray:
        """Matrix of the linear mean/offset system at time t."""
        P, P1 = unpack_gains(t)
        Lm = np.zeros((dim, dim))
        Fm, Mh = co.F[0], co.M[0]

        def blk(kind, l):
            base = {"m": 0, "s": 1, "s1": 2, "y2": 3}[kind] * n * L
            return slice(base + l * n, base + (l + 1) * n)

        # xbar = sum_l w_l m_l ; helpers accumulate coefficient matrices on (m_l)
        for l in range(L):
            A, D, B, C, Ft, Si, G, Kx, Ks, Kb = _node_gains(co, P[l], l)
            # forward means
            Lm[blk("m", l), blk("m", l)] += A + B @ Kx
            Lm[blk("m", l), blk("s", l)] += B @ Ks
            for j in range(L):
                Lm[blk("m", l), blk("m", j)] += w[j] * (B @ Kb + Fm)
            # gamma offset
            Lm[blk("s", l), blk("s", l)] += -A.T + G @ Si @ B.T
            xb = G @ Si @ D.T @ P[l] @ Ft - P[l] @ Fm - C.T @ P[l] @ Ft + Mh
            for j in range(L):
                Lm[blk("s", l), blk("m", j)] += w[j] * xb
            # y1 offset
            H1 = P1[l] @ B + C.T @ P1[l] @ D
            Lm[blk("s1", l), blk("s1", l)] += -A.T
            Lm[blk("s1", l), blk("s", l)] += -H1 @ Ks
            xb1 = -H1 @ Kb - P1[l] @ Fm - C.T @ P1[l] @ Ft
            for j in range(L):
                Lm[blk("s1", l), blk("m", j)] += w[j] * xb1
        # shared deterministic forcing: g = F^T int y2 + F^T ybar1 + Ft^T betabar1
        # ybar1 = sum w_l (P1_l m_l + s1_l)
        # betabar1 = sum w_l P1_l (C m_l + D_l (Kx m_l + Ks s_l + Kb xbar) + Ft xbar)
        ybar = np.zeros((n, dim))
        bbar = np.zeros((n, dim))
        ibar = np.zeros((n, dim))
        xbar = np.zeros((n, dim))
        for l in range(L):
            xbar[:, blk("m", l)] += w[l] * np.eye(n)
        for l in range(L):
            A, D, B, C, Ft, Si, G, Kx, Ks, Kb = _node_gains(co, P[l], l)
            ybar[:, blk("m", l)] += w[l] * P1[l]
            ybar[:, blk("s1", l)] += w[l] * np.eye(n)
            bbar[:, blk("m", l)] += w[l] * P1[l] @ (C + D @ Kx)
            bbar[:, blk("s", l)] += w[l] * P1[l] @ D @ Ks
            bbar += w[l] * P1[l] @ (D @ Kb + Ft) @ xbar
            ibar[:, blk("y2", l)] += w[l] * np.eye(n)
        Ftl = co.F_tilde[0]
        g = Fm.T @ ibar + Fm.T @ ybar + Ftl.T @ bbar
        for l in range(L):
            Lm[blk("s", l), :] += g
            A = co.A[0, l]
            Lm[blk("y2", l), :] += -Mh @ xbar - Fm.T @ ybar - Ftl.T @ bbar
            Lm[blk("y2", l), blk("y2", l)] += -A.T
            if y2_coupling == "nodewise":
                Lm[blk("y2", l), blk("y2", l)] += -Fm.T
            else:
                Lm[blk("y2", l), :] += -Fm.T @ ibar
        return Lm

    # fundamental matrix of the linear system, integrated forward
    def fundamental(co):
        def f(t, z):
            Phi = z.reshape(dim, dim)
            return (linear_map(co, t) @ Phi).ravel()

        return f

    fund = _integrate(fundamental, np.eye(dim).ravel(), seg, False, spec, "mean/offset system")
    PhiT = fund(spec.T)[0].reshape(dim, dim)
    nm = n * L
    m0 = np.tile(spec.xi, L)
    Phi_bm, Phi_bb = PhiT[nm:, :nm], PhiT[nm:, nm:]
    try:
        b0 = -np.linalg.solve(Phi_bb, Phi_bm @ m0)
    except np.linalg.LinAlgError as exc:
        raise RiccatiBlowUp("two-point mean/offset problem is singular") from exc
    z0 = np.concatenate([m0, b0])

    def state(t):
        Phi = fund(t).reshape(-1, dim, dim)
        return Phi @ z0

    t = grid.times
    Z = state(t)
    gv = gd(t)
    P = gv[:, : L * nn].reshape(-1, L, n, n)
    P1 = gv[:, L * nn :].reshape(-1, L, n, n)
    mnode = Z[:, :nm].reshape(-1, L, n)
    s = Z[:, nm : 2 * nm].reshape(-1, L, n)
    s1 = Z[:, 2 * nm : 3 * nm].reshape(-1, L, n)
    y2 = Z[:, 3 * nm :].reshape(-1, L, n)
    xbar = np.einsum("l,kln->kn", w, mnode)
    ngam = np.einsum("klij,klj->kli", P, mnode) + s
    my1 = np.einsum("l,kln->kn", w, np.einsum("klij,klj->kli", P1, mnode) + s1)
    # mean beta1 needs the gains at each grid time
    mb1 = np.zeros_like(xbar)
    for k in range(t.size):
        co = _cell(spec, t[k], t[k])
        for l in range(L):
            A, D, B, C, Ft, Si, G, Kx, Ks, Kb = _node_gains(co, P[k, l], l)
            eu = Kx @ mnode[k, l] + Ks @ s[k, l] + Kb @ xbar[k]
            mb1[k] += w[l] * P1[k, l] @ (C @ mnode[k, l] + D @ eu + Ft @ xbar[k])
    return RiccatiMFSolution(
        times=t,
        P=P,
        P1=P1,
        node_mean_alpha=mnode,
        s=s,
        s1=s1,
        y2=y2,
        mean_alpha=xbar,
        node_mean_gamma=ngam,
        mean_gamma=np.einsum("l,kln->kn", w, ngam),
        mean_y1=my1,
        mean_beta1=mb1,
        weights=w.copy(),
        state=state,
        gains=unpack_gains,
        y2_coupling=y2_coupling,
    )


# --------------------------------------------------------------------------
# centralized stacked problem
# --------------------------------------------------------------------------


@dataclass
class StackedSystem:
    """Stacked N-agent matrices for one time cell."""

    A: np.ndarray  # (Nn, Nn)
    B: np.ndarray  # (Nn, Nm)
    C: list  # N matrices (Nn, Nn), one per Brownian motion
    D: list  # N matrices (Nn, Nm)
    Q: np.ndarray  # (Nn, Nn)
    R: np.ndarray  # (Nm, Nm)


def stacked_system(co: CellCoefficients, k: int, types: np.ndarray) -> StackedSystem:
    """Assemble the stacked matrices on cell ``k`` for agents of the given node types."""
    N = types.size
    n, m = co.B.shape[1], co.B.shape[2]
    F, Ft, Q, H, R = co.F[k], co.F_tilde[k], co.Q[k], co.H[k], co.R[k]
    A = np.zeros((N * n, N * n))
    B = np.zeros((N * n, N * m))
    for i in range(N):
        A[i * n : (i + 1) * n, i * n : (i + 1) * n] = co.A[k, types[i]]
        B[i * n : (i + 1) * n, i * m : (i + 1) * m] = co.B[k]
        for j in range(N):
            A[i * n : (i + 1) * n, j * n : (j + 1) * n] += F / N
    Cs, Ds = [], []
    for i in range(N):
        Ci = np.zeros((N * n, N * n))
        for j in range(N):
            Ci[i * n : (i + 1) * n, j * n : (j + 1) * n] = Ft / N
        Ci[i * n : (i + 1) * n, i * n : (i + 1) * n] += co.C[k]
        Di = np.zeros((N * n, N * m))
        Di[i * n : (i + 1) * n, i * m : (i + 1) * m] = co.D[k, types[i]]
        Cs.append(Ci)
        Ds.append(Di)
    # sum_i |x_i - H xbar|_Q^2 = x^T (I (x) Q + (1/N) 11^T (x) (H^T Q H - Q H - H^T Q)) x
    cross = H.T @ Q @ H - Q @ H - H.T @ Q
    Qs = np.kron(np.eye(N), Q) + np.kron(np.ones((N, N)), cross) / N
    Rs = np.kron(np.eye(N), R)
    return StackedSystem(A, B, Cs, Ds, 0.5 * (Qs + Qs.T), Rs)


def stacked_riccati_value(
    co: CellCoefficients, dt: float, types: np.ndarray, x0: np.ndarray, scheme: str = "euler"
) -> tuple[float, np.ndarray]:
    """Optimal social cost ``inf J_soc`` and P(0) of the stacked problem.

    ``scheme="euler"`` gives the exact optimum of the Euler-discretized
    problem with trapezoid state weights and left-point control weights
    (the same quadrature the population simulator uses).
    ``scheme="continuous"`` integrates the continuous-time stochastic Riccati
    equation with a fine RK4 substep inside every cell.
    """
    K = co.B.shape[0]
    N = types.size
    dimx = N * co.B.shape[1]
    P = np.zeros((dimx, dimx))
    sys_ = [stacked_system(co, k, types) for k in range(K)]
    if scheme == "euler":
        P = 0.5 * dt * sys_[-1].Q if K else P
        for k in range(K - 1, -1, -1):
            S = sys_[k]
            # trapezoid: node k carries dt/2 from cell k and dt/2 from cell k-1
            Ab = np.eye(dimx) + S.A * dt
            Bb = S.B * dt
            Hxx = Ab.T @ P @ Ab
            Hxu = Ab.T @ P @ Bb
            Huu = Bb.T @ P @ Bb + dt * S.R
            for Ci, Di in zip(S.C, S.D):
                CP = Ci.T @ P
                Hxx += dt * CP @ Ci
                Hxu += dt * CP @ Di
                Huu += dt * Di.T @ P @ Di
            Hxx += 0.5 * dt * S.Q
            if k > 0:
                Hxx += 0.5 * dt * sys_[k - 1].Q
            Huu = 0.5 * (Huu + Huu.T)
            P = Hxx - Hxu @ np.linalg.solve(Huu, Hxu.T)
            P = 0.5 * (P + P.T)
            if not np.all(np.isfinite(P)) or np.abs(P).max() > BLOWUP:
                raise RiccatiBlowUp("stacked discrete Riccati recursion diverged")
        # P now carries the full trapezoid weight of node 0 already
        return 0.5 * float(x0 @ P @ x0), P
    if scheme == "continuous":
        sub = 20
        h = dt / sub

        def rhs(P, S):
            G = P @ S.B
            Sig = S.R.copy()
            out = P @ S.A + S.A.T @ P + S.Q
            for Ci, Di in zip(S.C, S.D):
                out += Ci.T @ P @ Ci
                G = G + Ci.T @ P @ Di
                Sig = Sig + Di.T @ P @ Di
            return -(out - G @ np.linalg.solve(Sig, G.T))

        for k in range(K - 1, -1, -1):
            S = sys_[k]
            for _ in range(sub):
                k1 = rhs(P, S)
                k2 = rhs(P - 0.5 * h * k1, S)
                k3 = rhs(P - 0.5 * h * k2, S)
                k4 = rhs(P - h * k3, S)
                P = P - h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
                P = 0.5 * (P + P.T)
            if not np.all(np.isfinite(P)) or np.abs(P).max() > BLOWUP:
                raise RiccatiBlowUp("stacked Riccati equation diverged")
        return 0.5 * float(x0 @ P @ x0), P
    raise ValueError(f"unknown scheme {scheme!r}")
