"""Consistency-condition solver.

The consistency system couples a forward state ``alpha`` with three adjoint
blocks: ``(gamma, vartheta)`` and ``(y1, beta1)`` are backward SDEs and
``y2`` is a deterministic backward ODE per diversity node.  It is solved by
Picard iteration on a Monte Carlo ensemble:

1. control from the current adjoints (conditional expectation, then
   ``R^{-1}``, then the R-weighted projection onto the control set);
2. Euler forward pass for ``alpha`` with the spatial coupling closed by
   running sample means;
3. backward pass: least-squares regression on ``(alpha_t, node)`` for the
   conditional expectations, increment regression for the Z-components,
   sample means / quadrature sums for the mean-field terms, explicit Euler
   for ``y2`` per node.

The unconstrained full-information oracles live in :mod:`mftlab.riccati` and
are re-exported here.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .model import CellCoefficients, ModelError, ModelSpec, require_valid, tabulate
from .projections import (
    ConditionalExpectationEstimator,
    ConditionedField,
    GroupFit,
    WeightedProjection,
    fit_condition,
    group_regression,
    info_features,
    project_batch,
    state_basis,
    colmean,
)
from .riccati import ReducedODESolution, RiccatiBlowUp, RiccatiMFSolution, solve_reduced_ode, solve_riccati_mf
from .stochastics import PathEnsemble, TimeGrid

__all__ = [
    "CCSolution",
    "ControlField",
    "RiccatiBlowUp",
    "ReducedODESolution",
    "RiccatiMFSolution",
    "SolverDiverged",
    "decentralized_control",
    "solve_cc",
    "solve_cc_homogeneous",
    "solve_cc_reduced",
    "solve_reduced_ode",
    "solve_riccati_mf",
]


class SolverDiverged(RuntimeError):
    """Raised by callers that require a converged solution."""


# --------------------------------------------------------------------------
# solution container
# --------------------------------------------------------------------------


@dataclass
class CCSolution:
    """Discretized solution on an ensemble of M paths and K steps.

    ``alpha``, ``gamma``, ``y1``: (M, K+1, n); ``vartheta``, ``beta1``: (M, K, n);
    ``y2``: (nodes, K+1, n); ``control``: (M, K, m).  The views ``X``, ``Y``,
    ``Z`` group them as state, adjoint values and adjoint integrands.
    """

    grid: TimeGrid
    theta: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    vartheta: np.ndarray
    y1: np.ndarray
    beta1: np.ndarray
    y2: np.ndarray
    control: np.ndarray
    mean_alpha: np.ndarray
    mean_y1: np.ndarray
    mean_beta1: np.ndarray
    int_y2: np.ndarray
    iterations: int
    residual_history: list
    status: str
    rho: float
    damping: float
    y2_coupling: str
    reduced: bool
    control_field: "ControlField | None" = None
    weights: np.ndarray | None = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def diverged(self) -> bool:
        return not self.converged

    @property
    def mean_gamma(self) -> np.ndarray:
        return np.swapaxes(self.gamma, 0, 1).mean(axis=1)

    @property
    def X(self) -> np.ndarray:
        return self.alpha

    @property
    def Y(self) -> tuple:
        return self.gamma, self.y1, self.y2

    @property
    def Z(self) -> tuple:
        return self.vartheta, self.beta1

    def curves(self) -> dict:
        """Deterministic curves on the grid: means of alpha, gamma, y1 and y2 per node."""
        out = {"t": self.grid.times, "mean_alpha": self.mean_alpha, "mean_gamma": self.mean_gamma}
        out["mean_y1"] = self.mean_y1
        for j in range(self.y2.shape[0]):
            out[f"y2_node{j}"] = self.y2[j]
        return out


# --------------------------------------------------------------------------
# control field for fresh agents
# --------------------------------------------------------------------------


@dataclass
class ControlField:
    """Decentralized control ``u = P_Gamma[R^{-1} E[-B^T p - D^T q | G_t]]`` for any agent.

    Under full information the conditional expectation is a fitted function
    of the agent's own frozen state and node; under trivial information it
    is a deterministic curve; under delayed information it is a fitted
    function of the agent's lagged Brownian value and node.
    """

    kind: str
    grid: TimeGrid
    fits: list
    R: np.ndarray
    R_inv: np.ndarray
    projections: list
    pattern: object
    needs_state: bool = field(init=False)

    def __post_init__(self):
        self.needs_state = self.kind == "full"

    def pre_projection(self, k: int, state: np.ndarray, theta: np.ndarray, W: np.ndarray | None = None) -> np.ndarray:
        f = self.fits[k]
        if self.kind == "full":
            return f.evaluate(state_basis(state), theta)
        feats = None
        if self.kind == "delayed":
            feats = info_features(self.pattern, self.grid, W, k)
        return f.evaluate(None, theta, feats)

    def __call__(self, k: int, state: np.ndarray, theta: np.ndarray, W: np.ndarray | None = None) -> np.ndarray:
        """Control on cell ``k``; ``state`` (P, n) is the agent's frozen state, ``W`` (P, K+1) its Brownian path."""
        v = self.pre_projection(k, state, theta, W)
        return project_batch(self.projections[k], v @ self.R_inv[k].T)


# --------------------------------------------------------------------------
# internals
# --------------------------------------------------------------------------


@dataclass
class _Ctx:
    spec: ModelSpec
    grid: TimeGrid
    co: CellCoefficients
    theta: np.ndarray
    dW: np.ndarray
    W: np.ndarray
    n_nodes: int
    est: ConditionalExpectationEstimator
    proj: list
    y2_coupling: str
    reduced: bool


@dataclass
class _Iterate:
    alpha: np.ndarray
    gamma: np.ndarray
    vartheta: np.ndarray
    y1: np.ndarray
    beta1: np.ndarray
    y2: np.ndarray
    control: np.ndarray | None = None
    mean_y1: np.ndarray | None = None
    mean_beta1: np.ndarray | None = None
    int_y2: np.ndarray | None = None


def _make_ctx(spec, grid, ensemble, y2_coupling, reduced, force_single_node=False) -> _Ctx:
    if ensemble.grid.steps != grid.steps or abs(ensemble.grid.T - grid.T) > 1e-12:
        raise ModelError("ensemble grid does not match the solver grid")
    co = tabulate(spec, grid.times)
    theta = ensemble.theta
    n_nodes = spec.diversity.n_nodes
    if force_single_node:
        co = CellCoefficients(**{**co.__dict__, "A": co.A[:, :1].copy(), "D": co.D[:, :1].copy(), "weights": np.ones(1)})
        theta = np.zeros_like(theta)
        n_nodes = 1
    elif ensemble.law.n_nodes != n_nodes:
        raise ModelError("ensemble diversity law does not match the model")
    if y2_coupling not in ("nodewise", "averaged"):
        raise ValueError(f"unknown y2 coupling {y2_coupling!r}")
    proj = [WeightedProjection(co.R[k], spec.constraint) for k in range(grid.steps)]
    return _Ctx(
        spec,
        grid,
        co,
        theta,
        np.ascontiguousarray(ensemble.dW.T),
        ensemble.W,
        n_nodes,
        ConditionalExpectationEstimator(spec.info),
        proj,
        y2_coupling,
        reduced,
    )


def _zero_iterate(ctx: _Ctx) -> _Iterate:
    K, M = ctx.dW.shape
    n = ctx.spec.n
    return _Iterate(
        alpha=np.zeros((K + 1, M, n)),
        gamma=np.zeros((K + 1, M, n)),
        vartheta=np.zeros((K, M, n)),
        y1=np.zeros((K + 1, M, n)),
        beta1=np.zeros((K, M, n)),
        y2=np.zeros((ctx.n_nodes, K + 1, n)),
    )


def _pre_projection(ctx: _Ctx, k: int, gamma_k: np.ndarray, vartheta_k: np.ndarray) -> np.ndarray:
    co = ctx.co
    v = -(gamma_k @ co.B[k]) - np.einsum("pi,pij->pj", vartheta_k, co.D[k][ctx.theta])
    return v


def _controls(ctx: _Ctx, it: _Iterate) -> np.ndarray:
    K, M = ctx.dW.shape
    out = np.empty((K, M, ctx.spec.m))
    for k in range(K):
        v = _pre_projection(ctx, k, it.gamma[k], it.vartheta[k])
        feats = info_features(ctx.spec.info, ctx.grid, ctx.W, k) if ctx.spec.info.kind == "delayed" else None
        v, _ = fit_condition(ctx.est, v, ctx.theta, ctx.n_nodes, feats)
        out[k] = project_batch(ctx.proj[k], v @ ctx.co.R_inv[k].T)
    return out


def _forward(ctx: _Ctx, control: np.ndarray) -> np.ndarray:
    co, dt = ctx.co, ctx.grid.dt
    K, M = ctx.dW.shape
    alpha = np.empty((K + 1, M, ctx.spec.n))
    alpha[0] = ctx.spec.xi
    for k in range(K):
        a = alpha[k]
        xbar = colmean(a)
        u = control[k]
        drift = u @ co.B[k].T + xbar @ co.F[k].T
        diff = np.einsum("pij,pj->pi", co.D[k][ctx.theta], u) + xbar @ co.F_tilde[k].T
        alpha[k + 1] = kernels.euler_step(a, ctx.theta, co.A[k], co.C[k], drift, diff, dt, ctx.dW[k])
    return alpha


def _backward(ctx: _Ctx, alpha: np.ndarray) -> _Iterate:
    co, dt = ctx.co, ctx.grid.dt
    K, M = ctx.dW.shape
    n = ctx.spec.n
    L = ctx.n_nodes
    w = co.weights if L == co.weights.shape[0] else np.ones(1)
    gamma = np.zeros((K + 1, M, n))
    vartheta = np.zeros((K, M, n))
    y1 = np.zeros((K + 1, M, n))
    beta1 = np.zeros((K, M, n))
    y2 = np.zeros((L, K + 1, n))
    mean_y1 = np.zeros((K + 1, n))
    mean_beta1 = np.zeros((K, n))
    int_y2 = np.zeros((K + 1, n))
    full = not ctx.reduced
    for k in range(K - 1, -1, -1):
        a = alpha[k]
        xbar = colmean(a)
        X = state_basis(a)
        dw = ctx.dW[k][:, None] / dt
        g1 = gamma[k + 1]
        targets = [g1, g1 * dw]
        if full:
            h1 = y1[k + 1]
            targets += [h1, h1 * dw]
        fitted, _ = group_regression(X, ctx.theta, L, np.concatenate(targets, axis=1))
        e_gamma, vartheta[k] = fitted[:, :n], fitted[:, n : 2 * n]
        At = co.A[k][ctx.theta]  # (M, n, n)
        C, Q, Mh = co.C[k], co.Q[k], co.M[k]
        g = xbar @ Mh.T
        if full:
            e_y1, beta1[k] = fitted[:, 2 * n : 3 * n], fitted[:, 3 * n :]
            y1[k] = e_y1 - dt * (a @ Q.T - np.einsum("pji,pj->pi", At, e_y1) - beta1[k] @ C)
            mean_beta1[k] = colmean(beta1[k])
            my1_next = mean_y1[k + 1]
            Fm, Ft = co.F[k], co.F_tilde[k]
            common = -(xbar @ Mh.T) - my1_next @ Fm - mean_beta1[k] @ Ft
            iy2 = w @ y2[:, k + 1]
            for l in range(L):
                own = -(y2[l, k + 1] @ co.A[k, l])
                if ctx.y2_coupling == "nodewise":
                    own = own - y2[l, k + 1] @ Fm
                else:
                    own = own - iy2 @ Fm
                y2[l, k] = y2[l, k + 1] - dt * (common + own)
            g = g + iy2 @ Fm + my1_next @ Fm + mean_beta1[k] @ Ft
            mean_y1[k] = colmean(y1[k])
            int_y2[k] = w @ y2[:, k]
        drv = -(a @ Q.T) + g - np.einsum("pji,pj->pi", At, e_gamma) - vartheta[k] @ C
        gamma[k] = e_gamma - dt * drv
    return _Iterate(alpha, gamma, vartheta, y1, beta1, y2, mean_y1=mean_y1, mean_beta1=mean_beta1, int_y2=int_y2)


def _discounted_distance(ctx: _Ctx, a: _Iterate, b: _Iterate, rho: float) -> float:
    dt = ctx.grid.dt
    t = ctx.grid.times
    wt = np.exp(-rho * t)

    def node_sq(x):  # (K(+1), M, n) -> per-time mean squared norm
        x = x.reshape(x.shape[0], -1)
        return np.einsum("km,km->k", x, x) / ctx.dW.shape[1]

    tot = node_sq(a.alpha - b.alpha) + node_sq(a.gamma - b.gamma)
    z = node_sq(a.vartheta - b.vartheta)
    if not ctx.reduced:
        tot = tot + node_sq(a.y1 - b.y1)
        d2 = a.y2 - b.y2
        frac = np.bincount(ctx.theta, minlength=d2.shape[0]) / ctx.theta.shape[0]
        tot = tot + frac @ np.sum(d2 * d2, axis=-1)
        z = z + node_sq(a.beta1 - b.beta1)
    return float(np.sqrt(dt * (np.sum(wt * tot) + np.sum(wt[:-1] * z))))


def _mix(old: _Iterate, new: _Iterate, omega: float) -> _Iterate:
    if omega == 1.0:
        return new

    def m(x, y):
        return (1.0 - omega) * x + omega * y

    return _Iterate(
        alpha=new.alpha,
        gamma=m(old.gamma, new.gamma),
        vartheta=m(old.vartheta, new.vartheta),
        y1=m(old.y1, new.y1),
        beta1=m(old.beta1, new.beta1),
        y2=m(old.y2, new.y2),
        mean_y1=m(old.mean_y1, new.mean_y1) if old.mean_y1 is not None else new.mean_y1,
        mean_beta1=m(old.mean_beta1, new.mean_beta1) if old.mean_beta1 is not None else new.mean_beta1,
        int_y2=m(old.int_y2, new.int_y2) if old.int_y2 is not None else new.int_y2,
    )


def _build_field(ctx: _Ctx, it: _Iterate) -> ControlField:
    K = ctx.grid.steps
    fits = []
    kind = ctx.spec.info.kind
    for k in range(K):
        v = _pre_projection(ctx, k, it.gamma[k], it.vartheta[k])
        if kind == "full":
            _, gf = group_regression(state_basis(it.alpha[k]), ctx.theta, ctx.n_nodes, v)
            fits.append(gf)
        else:
            feats = info_features(ctx.spec.info, ctx.grid, ctx.W, k) if kind == "delayed" else None
            _, cf = fit_condition(ctx.est, v, ctx.theta, ctx.n_nodes, feats)
            fits.append(cf)
    return ControlField(kind, ctx.grid, fits, ctx.co.R, ctx.co.R_inv, ctx.proj, ctx.spec.info)


def _default_rho(spec: ModelSpec) -> float:
    from .wellposedness import compute_constants, optimize_modulus

    rep = compute_constants(spec)
    if rep.a4_satisfied:
        return float(optimize_modulus(rep)[0])
    return 0.0


def _solve(
    spec: ModelSpec,
    grid: TimeGrid,
    ensemble: PathEnsemble,
    tol: float,
    max_iter: int,
    damping: float,
    rho: float | None,
    y2_coupling: str,
    reduced: bool,
    initial: "CCSolution | None",
    force_single_node: bool = False,
) -> CCSolution:
    require_valid(spec)
    if not (0.0 < damping <= 1.0):
        raise ValueError("damping must lie in (0, 1]")
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol must be positive and max_iter at least 1")
    ctx = _make_ctx(spec, grid, ensemble, y2_coupling, reduced, force_single_node)
    if rho is None:
        rho = _default_rho(spec)
    cur = _zero_iterate(ctx)
    if initial is not None:
        tm = np.swapaxes
        cur = _Iterate(
            tm(initial.alpha, 0, 1), tm(initial.gamma, 0, 1), tm(initial.vartheta, 0, 1),
            tm(initial.y1, 0, 1), tm(initial.beta1, 0, 1), initial.y2,
            mean_y1=initial.mean_y1, mean_beta1=initial.mean_beta1, int_y2=initial.int_y2,
        )
    history: list[float] = []
    status = "max_iter"
    control = None
    for _ in range(max_iter):
        control = _controls(ctx, cur)
        alpha = _forward(ctx, control)
        new = _mix(cur, _backward(ctx, alpha), damping)
        res = _discounted_distance(ctx, new, cur, rho)
        history.append(res)
        cur = new
        if not np.isfinite(res) or (len(history) > 1 and res > 1e8 * max(history[0], 1e-300)):
            status = "diverged"
            break
        if res <= tol:
            status = "converged"
            break
    K = grid.steps
    mean_y1 = cur.mean_y1 if cur.mean_y1 is not None else np.zeros((K + 1, spec.n))
    mean_beta1 = cur.mean_beta1 if cur.mean_beta1 is not None else np.zeros((K, spec.n))
    int_y2 = cur.int_y2 if cur.int_y2 is not None else np.zeros((K + 1, spec.n))
    sol = CCSolution(
        grid=grid,
        theta=ctx.theta,
        alpha=np.swapaxes(cur.alpha, 0, 1),
        gamma=np.swapaxes(cur.gamma, 0, 1),
        vartheta=np.swapaxes(cur.vartheta, 0, 1),
        y1=np.swapaxes(cur.y1, 0, 1),
        beta1=np.swapaxes(cur.beta1, 0, 1),
        y2=cur.y2,
        control=np.swapaxes(control, 0, 1),
        mean_alpha=cur.alpha.mean(axis=1),
        mean_y1=mean_y1,
        mean_beta1=mean_beta1,
        int_y2=int_y2,
        iterations=len(history),
        residual_history=history,
        status=status,
        rho=float(rho),
        damping=damping,
        y2_coupling=y2_coupling,
        reduced=reduced,
        weights=ctx.co.weights.copy(),
    )
    if status != "diverged":
        sol.control_field = _build_field(ctx, cur)
    return sol


# --------------------------------------------------------------------------
# public solvers
# --------------------------------------------------------------------------


def solve_cc(
    spec: ModelSpec,
    grid: TimeGrid,
    ensemble: PathEnsemble,
    tol: float = 1e-8,
    max_iter: int = 50,
    *,
    damping: float = 1.0,
    rho: float | None = None,
    y2_coupling: str = "nodewise",
    initial: CCSolution | None = None,
) -> CCSolution:
    """Picard solution of the full consistency system on ``ensemble``.

    Parameters
    ----------
    tol, max_iter
        Stop once the discounted L2 distance between successive iterates is
        at most ``tol``; otherwise return the last iterate with status
        ``"max_iter"`` (or ``"diverged"`` on blow-up).
    damping
        Relaxation weight in ``(0, 1]`` applied to the adjoint iterate.
    rho
        Discount rate of the residual norm; by default the optimized rate
        from :func:`mftlab.wellposedness.optimize_modulus` when the
        monotonicity condition holds, else 0.
    y2_coupling
        ``"nodewise"`` uses ``-F^T y2^theta`` in the ``y2`` driver;
        ``"averaged"`` uses ``-F^T`` times the quadrature mean of ``y2``.
    initial
        Warm start from an earlier solution (its adjoints feed the first sweep).
    """
    return _solve(spec, grid, ensemble, tol, max_iter, damping, rho, y2_coupling, False, initial)


def solve_cc_reduced(
    spec: ModelSpec,
    grid: TimeGrid,
    ensemble: PathEnsemble,
    tol: float = 1e-8,
    max_iter: int = 50,
    *,
    damping: float = 1.0,
    rho: float | None = None,
) -> CCSolution:
    """Solve only ``(alpha, gamma, vartheta)`` for models without state coupling (F = F~ = 0)."""
    co = spec.coefficients
    if np.any(co["F"].values != 0) or np.any(co["F_tilde"].values != 0):
        raise ModelError("the reduced system needs F = F~ = 0")
    return _solve(spec, grid, ensemble, tol, max_iter, damping, rho, "nodewise", True, None)


def solve_cc_homogeneous(
    spec: ModelSpec,
    grid: TimeGrid,
    ensemble: PathEnsemble,
    tol: float = 1e-8,
    max_iter: int = 50,
    *,
    damping: float = 1.0,
    rho: float | None = None,
) -> CCSolution:
    """Solve the homogeneous system: a single coefficient node, no diversity index."""
    if spec.diversity.kind != "dirac":
        raise ModelError("homogeneous solver needs a Dirac diversity law")
    return _solve(spec, grid, ensemble, tol, max_iter, damping, rho, "nodewise", False, None, force_single_node=True)


def decentralized_control(sol: CCSolution, spec: ModelSpec) -> ControlField:
    """Control field of a fresh agent facing the frozen mean-field terms of ``sol``.

    With the mean-field terms frozen, a single agent's Hamiltonian system is
    the consistency system without its fixed-point closure, so its adjoints
    are the same functions of the agent's own state (or information) that
    the solver fitted on the ensemble.  The returned field evaluates
    ``P_Gamma[R^{-1} E[-B^T p - D^T q | G_t]]`` from those fits.
    """
    if sol.control_field is None or not sol.converged:
        raise SolverDiverged("decentralized control needs a converged solution")
    if sol.control_field.grid.steps != sol.grid.steps:
        raise ModelError("solution grid mismatch")
    if spec.info.kind != sol.control_field.kind:
        raise ModelError("information pattern differs from the solved model")
    return sol.control_field
