"""Finite-population simulation under the decentralized strategy, social cost,
the exact centralized benchmark and the person-by-person variation limits.

Work is split into fixed blocks of replications.  Threads only decide who
runs which block, so every array operation sees the same shapes whatever
the thread count and results are bitwise reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .cc_solver import CCSolution, decentralized_control
from .model import CellCoefficients, ModelError, ModelSpec, require_valid, tabulate
from .riccati import stacked_riccati_value
from .stochastics import TAG_DIAGNOSTICS, TAG_FROZEN, TAG_POPULATION, TimeGrid, parallel_fill, substream

BLOCK = 64  # replications per work unit
MAX_ORACLE_DIM = 256


@dataclass
class PopulationRun:
    """Outcome of ``replications`` independent N-agent systems.

    ``states``/``frozen``: (R, N, K+1, n) realized and frozen states;
    ``controls``: (R, N, K, m).  These are None when paths are not kept.
    ``social_cost`` is the per-agent social cost averaged over replications.
    """

    N: int
    replications: int
    grid: TimeGrid
    theta: np.ndarray
    state_average: np.ndarray
    cost_per_replication: np.ndarray
    frozen_cost_per_replication: np.ndarray
    social_cost: float
    social_cost_se: float
    consistency_curve: np.ndarray
    consistency_error: float
    frozen_gap: float
    frozen_gap_mean: float
    seed: int
    states: np.ndarray | None = None
    frozen: np.ndarray | None = None
    controls: np.ndarray | None = None


@dataclass
class VariationalDiagnostics:
    """Variations of one perturbed agent and their large-population limits.

    Trajectory arrays are (R, K+1, n) except ``delta_x`` and ``x_star``
    (R, N, K+1, n; the perturbed agent's row of ``x_star`` is zero) and
    ``x_star_star_nodes`` (R, nodes, K+1, n).
    """

    N: int
    agent: int
    delta_x: np.ndarray
    delta_x_i: np.ndarray
    delta_x_minus_i: np.ndarray
    x_star: np.ndarray
    x_star_star_nodes: np.ndarray
    x_star_star: np.ndarray
    gaps: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _rowmat(X: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Rows of ``X`` times ``M^T``, accumulated column by column (fixed order)."""
    out = X[:, :1] * M[:, 0]
    for c in range(1, X.shape[1]):
        out = out + X[:, c : c + 1] * M[:, c]
    return out


def _rowmat_nodes(X: np.ndarray, Ms: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Row-wise ``Ms[nodes[p]] @ X[p]`` with a fixed accumulation order."""
    if Ms.shape[0] == 1:
        return _rowmat(X, Ms[0])
    G = Ms[nodes]
    out = X[:, :1] * G[:, :, 0]
    for c in range(1, X.shape[1]):
        out = out + X[:, c : c + 1] * G[:, :, c]
    return out


def _quad(X: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Row-wise ``x^T M x``."""
    return np.sum(_rowmat(X, M) * X, axis=1)


def _draw_block(seed: int, tag: int, r0: int, r1: int, N: int, K: int, dt: float):
    u = np.empty((r1 - r0, N))
    dW = np.empty((r1 - r0, N, K))
    sq = np.sqrt(dt)
    for r in range(r0, r1):
        g = substream(seed, tag, r)
        u[r - r0] = g.random(N)
        dW[r - r0] = g.standard_normal((N, K)) * sq
    return u, dW


def _types(spec: ModelSpec, u: np.ndarray, N: int, how: str) -> np.ndarray:
    law = spec.diversity
    if how == "iid":
        return law.sample_from_uniforms(u.ravel()).reshape(u.shape).astype(np.int64)
    if how == "proportional":
        return np.broadcast_to(law.proportional_types(N), u.shape).copy()
    raise ValueError(f"unknown type assignment {how!r}")


def _blocks(R: int) -> list[tuple[int, int]]:
    return [(a, min(a + BLOCK, R)) for a in range(0, R, BLOCK)]


def _run_blocks(R: int, job: Callable[[int, int], None], threads: int | None) -> None:
    blocks = _blocks(R)

    def work(a: int, b: int) -> None:
        for j in range(a, b):
            job(*blocks[j])

    parallel_fill(len(blocks), work, threads)


# --------------------------------------------------------------------------
# population simulation
# --------------------------------------------------------------------------


def _simulate_block(spec, co, field_, mean_alpha, grid, th, dW, keep):
    """One block: th (R, N), dW (R, N, K).  Returns a dict of per-replication outputs."""
    R, N, K = dW.shape
    n, dt = spec.n, grid.dt
    P = R * N
    th = th.reshape(P)
    dWt = np.ascontiguousarray(np.moveaxis(dW, 2, 0)).reshape(K, P)
    W = None
    if field_.kind == "delayed":
        W = np.zeros((P, K + 1))
        np.cumsum(dW.reshape(P, K), axis=1, out=W[:, 1:])
    x = np.tile(np.asarray(spec.xi, dtype=float), (P, 1))
    l = x.copy()
    xbar = x.reshape(R, N, n).mean(axis=1)
    avg = np.empty((R, K + 1, n))
    avg[:, 0] = xbar
    cost = np.zeros(R)
    fcost = np.zeros(R)
    gap_sup = np.zeros(P)
    if keep:
        xs = np.empty((K + 1, P, n))
        ls = np.empty((K + 1, P, n))
        us = np.empty((K, P, spec.m))
        xs[0], ls[0] = x, l

    def state_cost(k_cell, x, xbar):
        rows = np.repeat(xbar, N, axis=0)
        e = x - _rowmat(rows, co.H[k_cell])
        return np.sum(_quad(e, co.Q[k_cell]).reshape(R, N), axis=1)

    def frozen_cost(k_cell, l, k_node):
        e = l - _rowmat(mean_alpha[k_node][None, :], co.H[k_cell])
        return np.sum(_quad(e, co.Q[k_cell]).reshape(R, N), axis=1)

    for k in range(K):
        u = field_(k, l, th, W)
        Bu = _rowmat(u, co.B[k])
        Du = _rowmat_nodes(u, co.D[k], th)
        ea = mean_alpha[k][None, :]
        l_new = kernels.euler_step(
            l, th, co.A[k], co.C[k], Bu + _rowmat(ea, co.F[k]), Du + _rowmat(ea, co.F_tilde[k]), dt, dWt[k]
        )
        rows = np.repeat(xbar, N, axis=0)
        x_new = kernels.euler_step(
            x, th, co.A[k], co.C[k], Bu + _rowmat(rows, co.F[k]), Du + _rowmat(rows, co.F_tilde[k]), dt, dWt[k]
        )
        # trapezoid in the state, left point in the control
        uc = dt * np.sum(_quad(u, co.R[k]).reshape(R, N), axis=1)
        cost += 0.5 * dt * state_cost(k, x, xbar) + uc
        fcost += 0.5 * dt * frozen_cost(k, l, k) + uc
        x, l = x_new, l_new
        xbar = x.reshape(R, N, n).mean(axis=1)
        cost += 0.5 * dt * state_cost(k, x, xbar)
        fcost += 0.5 * dt * frozen_cost(k, l, k + 1)
        avg[:, k + 1] = xbar
        d = x - l
        np.maximum(gap_sup, np.sum(d * d, axis=1), out=gap_sup)
        if keep:
            xs[k + 1], ls[k + 1], us[k] = x, l, u
    out = dict(avg=avg, cost=0.5 * cost / N, fcost=0.5 * fcost / N, gap_sup=gap_sup.reshape(R, N))
    if keep:
        out["states"] = np.moveaxis(xs, 0, 1).reshape(R, N, K + 1, n)
        out["frozen"] = np.moveaxis(ls, 0, 1).reshape(R, N, K + 1, n)
        out["controls"] = np.moveaxis(us, 0, 1).reshape(R, N, K, spec.m)
    return out


def simulate_population(
    spec: ModelSpec,
    sol: CCSolution,
    N: int,
    replications: int,
    seed: int,
    *,
    types: str = "iid",
    threads: int | None = None,
    keep_paths: bool = True,
) -> PopulationRun:
    """Simulate ``replications`` independent N-agent systems under the decentralized control.

    Every agent plays the control fitted by the consistency solver, evaluated
    on its frozen state (the state driven by the limiting mean instead of
    the empirical average).  The realized states feel the true empirical
    average.  ``types`` is ``"iid"`` (draws from the diversity law) or
    ``"proportional"`` (largest-remainder counts, the oracle's assignment).
    """
    if N < 2:
        raise ModelError("population needs N >= 2")
    if replications < 2:
        raise ModelError("need at least two replications for a standard error")
    return _population(spec, sol, N, replications, seed, types, threads, keep_paths, TAG_POPULATION)


def _population(spec, sol, N, replications, seed, types, threads, keep_paths, tag) -> PopulationRun:
    require_valid(spec)
    grid = sol.grid
    if sol.mean_alpha.shape[1] != spec.n:
        raise ModelError("solution and model differ in state dimension")
    field_ = decentralized_control(sol, spec)
    co = tabulate(spec, grid.times)
    K, n = grid.steps, spec.n
    R = replications
    theta = np.empty((R, N), dtype=np.int64)
    avg = np.empty((R, K + 1, n))
    cost = np.empty(R)
    fcost = np.empty(R)
    gap_sup = np.empty((R, N))
    states = np.empty((R, N, K + 1, n)) if keep_paths else None
    frozen = np.empty((R, N, K + 1, n)) if keep_paths else None
    controls = np.empty((R, N, K, spec.m)) if keep_paths else None

    def job(r0: int, r1: int) -> None:
        u, dW = _draw_block(seed, tag, r0, r1, N, K, grid.dt)
        th = _types(spec, u, N, types)
        out = _simulate_block(spec, co, field_, sol.mean_alpha, grid, th, dW, keep_paths)
        theta[r0:r1] = th
        avg[r0:r1] = out["avg"]
        cost[r0:r1] = out["cost"]
        fcost[r0:r1] = out["fcost"]
        gap_sup[r0:r1] = out["gap_sup"]
        if keep_paths:
            states[r0:r1] = out["states"]
            frozen[r0:r1] = out["frozen"]
            controls[r0:r1] = out["controls"]

    _run_blocks(R, job, threads)
    dev = avg - sol.mean_alpha[None]
    curve = np.mean(np.sum(dev * dev, axis=2), axis=0)
    per_agent = gap_sup.mean(axis=0)
    return PopulationRun(
        N=N,
        replications=R,
        grid=grid,
        theta=theta,
        state_average=avg,
        cost_per_replication=cost,
        frozen_cost_per_replication=fcost,
        social_cost=float(cost.mean()),
        social_cost_se=float(cost.std(ddof=1) / np.sqrt(R)),
        consistency_curve=curve,
        consistency_error=float(curve.max()),
        frozen_gap=float(per_agent.max()),
        frozen_gap_mean=float(per_agent.mean()),
        seed=seed,
        states=states,
        frozen=frozen,
        controls=controls,
    )


# --------------------------------------------------------------------------
# centralized benchmark
# --------------------------------------------------------------------------


def _oracle_checks(spec: ModelSpec, N: int) -> None:
    if spec.constraint.kind != "full":
        raise ModelError("the centralized benchmark needs an unconstrained control set")
    if spec.info.kind != "full":
        raise ModelError("the centralized benchmark needs full information")
    if spec.diversity.kind == "continuum":
        raise ModelError("the centralized benchmark needs a finite diversity law")
    if N < 1:
        raise ModelError("N must be positive")
    if N * spec.n > MAX_ORACLE_DIM:
        raise ModelError(f"stacked dimension {N * spec.n} exceeds {MAX_ORACLE_DIM}")


def centralized_oracle(spec: ModelSpec, N: int, grid: TimeGrid, scheme: str = "euler") -> float:
    """Optimal per-agent social cost of the N-agent team under centralized information.

    Types are assigned by largest-remainder rounding of the diversity law.
    ``scheme="euler"`` is the exact optimum of the discretization used by
    :func:`simulate_population`; ``"continuous"`` solves the continuous-time
    stacked Riccati equation.
    """
    require_valid(spec)
    _oracle_checks(spec, N)
    co = tabulate(spec, grid.times)
    types = spec.diversity.proportional_types(N)
    x0 = np.tile(np.asarray(spec.xi, dtype=float), N)
    value, _ = stacked_riccati_value(co, grid.dt, types, x0, scheme=scheme)
    return value / N


def frozen_cost_mean(
    spec: ModelSpec, sol: CCSolution, agents: int, seed: int, *, threads: int | None = None
) -> tuple[float, float]:
    """Mean and SE of one agent's cost along its frozen state, from ``agents`` independent agents.

    The frozen state does not feel the empirical average, so this mean is
    the same for every population size.
    """
    group = 256
    run = _population(spec, sol, group, max(2, -(-agents // group)), seed, "iid", threads, False, TAG_FROZEN)
    c = run.frozen_cost_per_replication
    return float(c.mean()), float(c.std(ddof=1) / np.sqrt(c.size))


def optimality_gap(
    spec: ModelSpec,
    sol: CCSolution,
    N: int,
    replications: int,
    seed: int,
    *,
    threads: int | None = None,
    control_variate: bool = True,
    frozen_agents: int = 1 << 20,
    frozen: tuple[float, float] | None = None,
) -> tuple[float, float]:
    """Per-agent cost of the decentralized strategy minus the centralized optimum, with its SE.

    With ``control_variate`` the realized cost is estimated as the mean of
    (realized - frozen) cost on the same agents plus the frozen-cost mean
    from ``frozen_agents`` independent agents; the difference has far
    smaller variance than the cost itself.  Pass ``frozen`` (mean, SE) to
    reuse one frozen-cost estimate across a sweep over N.
    """
    _oracle_checks(spec, N)
    run = simulate_population(spec, sol, N, replications, seed, types="proportional", threads=threads, keep_paths=False)
    best = centralized_oracle(spec, N, sol.grid)
    if not control_variate:
        return run.social_cost - best, run.social_cost_se
    d = run.cost_per_replication - run.frozen_cost_per_replication
    fm, fse = frozen if frozen is not None else frozen_cost_mean(spec, sol, frozen_agents, seed, threads=threads)
    se = np.sqrt(d.var(ddof=1) / d.size + fse**2)
    return float(d.mean() + fm - best), float(se)


# --------------------------------------------------------------------------
# person-by-person variations
# --------------------------------------------------------------------------


def _perturbation_path(perturbation, K: int, m: int) -> np.ndarray:
    if callable(perturbation):
        du = np.array([np.asarray(perturbation(k), dtype=float).reshape(m) for k in range(K)])
    else:
        du = np.asarray(perturbation, dtype=float)
        if du.ndim == 1 and m == 1:
            du = du[:, None]
        if du.shape != (K, m):
            raise ModelError(f"perturbation must have shape ({K}, {m})")
    return du


def _variation_block(co: CellCoefficients, grid, du, th, dW, agent, weights, coupling):
    R, N, K = dW.shape
    n = co.B.shape[1]
    L = co.A.shape[1]
    dt = grid.dt
    P = R * N
    thf = th.reshape(P)
    dWt = np.ascontiguousarray(np.moveaxis(dW, 2, 0)).reshape(K, P)
    is_i = np.zeros((R, N), dtype=bool)
    is_i[:, agent] = True
    is_i = is_i.reshape(P)
    dx = np.zeros((K + 1, P, n))
    xs = np.zeros((K + 1, P, n))
    xss = np.zeros((K + 1, R, L, n))
    zero = np.zeros((P, n))
    for k in range(K):
        F, Ft = co.F[k], co.F_tilde[k]
        cur = dx[k]
        mean = cur.reshape(R, N, n).mean(axis=1)
        rows = np.repeat(mean, N, axis=0)
        push = np.zeros((P, co.B.shape[2]))
        push[is_i] = du[k]
        drift = _rowmat(push, co.B[k]) + _rowmat(rows, F)
        diff = _rowmat_nodes(push, co.D[k], thf) + _rowmat(rows, Ft)
        dx[k + 1] = kernels.euler_step(cur, thf, co.A[k], co.C[k], drift, diff, dt, dWt[k])
        # limits: x** per node (deterministic given agent i's variation), x* per agent
        di = cur.reshape(R, N, n)[:, agent]
        node = xss[k]
        xstar_avg = np.einsum("l,rln->rn", weights, node)
        new_nodes = np.empty_like(node)
        for j in range(L):
            coupled = node[:, j] if coupling == "nodewise" else xstar_avg
            new_nodes[:, j] = node[:, j] + dt * (_rowmat(node[:, j], co.A[k, j]) + _rowmat(di + coupled, F))
        xss[k + 1] = new_nodes
        src = np.repeat(di + xstar_avg, N, axis=0)
        xs_new = kernels.euler_step(xs[k], thf, co.A[k], co.C[k], _rowmat(src, F), _rowmat(src, Ft), dt, dWt[k])
        xs_new[is_i] = zero[is_i]
        xs[k + 1] = xs_new
    dx = np.moveaxis(dx, 0, 1).reshape(R, N, K + 1, n)
    xs = np.moveaxis(xs, 0, 1).reshape(R, N, K + 1, n)
    xss = np.moveaxis(xss, 0, 2)  # (R, L, K+1, n)
    return dx, xs, xss


def variational_diagnostics(
    spec: ModelSpec,
    sol: CCSolution,
    N: int,
    perturbation,
    seed: int,
    replications: int = 100,
    *,
    agent: int = 0,
    threads: int | None = None,
    coupling: str | None = None,
    grid: TimeGrid | None = None,
) -> VariationalDiagnostics:
    """Variations caused by perturbing one agent's control and their limits.

    The variations are linear in the perturbation and do not depend on the
    base strategy, so only the grid (and the ``y2`` coupling convention) of
    ``sol`` is used; ``sol`` may be None when ``grid`` is given.  ``perturbation`` is a (K, m) array or a function of
    the cell index.  Reported statistics (sup over grid times):

    - ``star``: mean over agents j != i of E sup_t |N dx_j - x*_j|^2;
    - ``star_sup_j``: the same with the max over j instead of the mean;
    - ``star_star_inside``: sup_t E|x** - dx_{-i}|^2;
    - ``star_star_outside``: E sup_t |x** - dx_{-i}|^2.
    """
    if N < 2:
        raise ModelError("need N >= 2")
    if not 0 <= agent < N:
        raise ModelError("agent index out of range")
    if replications < 2:
        raise ModelError("need at least two replications")
    require_valid(spec)
    if sol is None and grid is None:
        raise ModelError("need a solution or a grid")
    grid = grid or sol.grid
    coupling = coupling or (sol.y2_coupling if sol is not None else "nodewise")
    if coupling not in ("nodewise", "averaged"):
        raise ValueError(f"unknown coupling {coupling!r}")
    co = tabulate(spec, grid.times)
    K, n, L = grid.steps, spec.n, spec.diversity.n_nodes
    du = _perturbation_path(perturbation, K, spec.m)
    R = replications
    dx = np.empty((R, N, K + 1, n))
    xs = np.empty((R, N, K + 1, n))
    xss = np.empty((R, L, K + 1, n))
    w = co.weights

    def job(r0: int, r1: int) -> None:
        u, dW = _draw_block(seed, TAG_DIAGNOSTICS, r0, r1, N, K, grid.dt)
        th = _types(spec, u, N, "iid")
        a, b, c = _variation_block(co, grid, du, th, dW, agent, w, coupling)
        dx[r0:r1], xs[r0:r1], xss[r0:r1] = a, b, c

    _run_blocks(R, job, threads)
    others = np.ones(N, dtype=bool)
    others[agent] = False
    dx_i = dx[:, agent]
    dx_minus = dx[:, others].sum(axis=1)
    x_ss = np.einsum("l,rlkn->rkn", w, xss)
    d1 = N * dx[:, others] - xs[:, others]
    sup1 = np.max(np.sum(d1 * d1, axis=-1), axis=2)  # (R, N-1)
    per_j = sup1.mean(axis=0)
    d2 = x_ss - dx_minus
    sq2 = np.sum(d2 * d2, axis=-1)  # (R, K+1)
    gaps = {
        "star": float(per_j.mean()),
        "star_sup_j": float(per_j.max()),
        "star_star_inside": float(sq2.mean(axis=0).max()),
        "star_star_outside": float(sq2.max(axis=1).mean()),
    }
    return VariationalDiagnostics(
        N=N,
        agent=agent,
        delta_x=dx,
        delta_x_i=dx_i,
        delta_x_minus_i=dx_minus,
        x_star=xs,
        x_star_star_nodes=xss,
        x_star_star=x_ss,
        gaps=gaps,
    )


# --------------------------------------------------------------------------
# rate verdicts shared by the experiment runner and the acceptance suite
# --------------------------------------------------------------------------


def gap_rate_verdicts(Ns, gaps, ses) -> dict:
    """Checks on a sweep of optimality gaps over increasing N.

    - ``nonnegative``: every gap >= -3 SE;
    - ``nonincreasing``: gap(N') <= gap(N) + SE(N') for consecutive N < N';
    - ``sqrt_bound``: one constant c = sqrt(N_0) (gap_0 + 3 SE_0), fixed at
      the smallest N, bounds every gap by c / sqrt(N).
    """
    Ns = np.asarray(Ns, dtype=float)
    g = np.asarray(gaps, dtype=float)
    s = np.asarray(ses, dtype=float)
    c = float(np.sqrt(Ns[0]) * max(g[0] + 3 * s[0], 0.0))
    return {
        "nonnegative": bool(np.all(g >= -3 * s)),
        "nonincreasing": bool(np.all(g[1:] <= g[:-1] + s[1:])),
        "sqrt_bound": bool(np.all(g <= c / np.sqrt(Ns) + 1e-15)),
        "c": c,
    }
