"""Single-agent mixtures P1/P2/P3 and weakly coupled populations M1/M2/M3/M
that share expectation dynamics and asymptotic state averages.

P1 draws the node at time 0 and uses one Brownian motion; P2 runs one copy
per node on a shared Brownian motion and mixes them with the law's masses;
P3 does the same with independent Brownian motions.  The mean-field term
is closed by the running sample mean of the mixture.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .model import CellCoefficients, ModelError, ModelSpec, require_valid, tabulate
from .population import _rowmat, _rowmat_nodes
from .stochastics import TAG_EQUIVALENCE, TAG_MSYSTEMS, TimeGrid, parallel_fill, substream

P_SYSTEMS = ("P1", "P2", "P3")
M_SYSTEMS = ("M1", "M2", "M3", "M")


@dataclass
class SystemsComparison:
    """Mean curves (K+1, n), second moments (K+1,) and their SEs per system.

    ``components`` holds per-node second moments (nodes, K+1) of P2 and P3.
    ``identities`` maps a name to (lhs, rhs, se) arrays over the grid.
    ``population_averages`` maps M-systems to (replications, K+1, n).
    """

    times: np.ndarray
    weights: np.ndarray
    mean_curves: dict = field(default_factory=dict)
    mean_ses: dict = field(default_factory=dict)
    second_moments: dict = field(default_factory=dict)
    ses: dict = field(default_factory=dict)
    components: dict = field(default_factory=dict)
    identities: dict = field(default_factory=dict)
    population_averages: dict = field(default_factory=dict)
    N: int | None = None

    def max_z(self, name: str) -> float:
        """Largest |lhs - rhs| / se over the grid; differences at rounding level count as 0."""
        lhs, rhs, se = (np.asarray(a, dtype=float) for a in self.identities[name])
        d = np.abs(lhs - rhs)
        d = np.where(d <= 1e-12 * (1.0 + np.abs(lhs)), 0.0, d)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(d == 0, 0.0, d / se)
        return float(np.max(z))

    def mean_gap_ratio(self, a: str, b: str) -> float:
        """max over grid and coordinates of |mean_a - mean_b| / (se_a + se_b)."""
        d = np.abs(self.mean_curves[a] - self.mean_curves[b])
        s = self.mean_ses[a] + self.mean_ses[b]
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(d == 0, 0.0, d / s)
        return float(np.max(z))


def _control_path(u, K: int, m: int) -> np.ndarray:
    if u is None:
        return np.zeros((K, m))
    u = np.asarray(u, dtype=float)
    if u.ndim == 1 and m == 1:
        u = u[:, None]
    if u.shape != (K, m):
        raise ModelError(f"control path must have shape ({K}, {m})")
    return u


def _se(v: np.ndarray) -> np.ndarray:
    return v.std(axis=0, ddof=1) / np.sqrt(v.shape[0])


# --------------------------------------------------------------------------
# single-agent systems
# --------------------------------------------------------------------------


def _draw_p(seed: int, M: int, L: int, K: int, dt: float, threads):
    sq = np.sqrt(dt)
    u01 = np.empty(M)
    dW1 = np.empty((M, K))
    dW2 = np.empty((M, K))
    dW3 = np.empty((M, L, K))

    def work(a, b):
        for p in range(a, b):
            g = substream(seed, TAG_EQUIVALENCE, p)
            u01[p] = g.random()
            dW1[p] = g.standard_normal(K) * sq
            dW2[p] = g.standard_normal(K) * sq
            dW3[p] = g.standard_normal((L, K)) * sq

    parallel_fill(M, work, threads)
    return u01, dW1, dW2, dW3


def _mixture_step(co: CellCoefficients, k: int, x: np.ndarray, nodes: np.ndarray, mix_mean, u, dt, dw):
    """Euler step for rows ``x`` with node ``nodes`` and mean-field input ``mix_mean``."""
    rows = x.shape[0]
    uu = np.broadcast_to(u, (rows, u.size))
    mm = np.broadcast_to(mix_mean, (rows, mix_mean.size))
    drift = _rowmat(uu, co.B[k]) + _rowmat(mm, co.F[k])
    diff = _rowmat_nodes(uu, co.D[k], nodes) + _rowmat(mm, co.F_tilde[k])
    return kernels.euler_step(x, nodes, co.A[k], co.C[k], drift, diff, dt, dw)


def simulate_p_systems(
    spec: ModelSpec, u, grid: TimeGrid, M: int, seed: int, *, threads: int | None = None
) -> SystemsComparison:
    """Simulate P1, P2, P3 on ``M`` paths each under the deterministic control path ``u``.

    Besides mean curves and second moments the result carries these
    identities as (lhs, rhs, se) over the grid:

    - ``p1_second``: E|x|^2 (P1) against sum_j m_j E|x~_j|^2 (P2);
    - ``p3_printed``: E|x^|^2 (P3) against sum_j m_j^2 E|x~_j|^2 (P2),
      which needs zero-mean components;
    - ``p3_exact``: E|x^|^2 against sum_j m_j^2 E|x^_j|^2 plus the
      independent cross terms 2 sum_{j<l} m_j m_l E x^_j . E x^_l;
    - ``p2_exact``: E|x~|^2 against sum_{j,l} m_j m_l E[x~_j . x~_l]
      (an algebraic identity; the SE column is that of E|x~|^2).

    ``components["p2_printed_cross"]`` keeps the value of the same expansion
    with coefficient 1 on the j < l terms, for reference.
    """
    require_valid(spec)
    if M < 2:
        raise ModelError("need at least two paths")
    co = tabulate(spec, grid.times)
    law = spec.diversity
    L, n, K, dt = law.n_nodes, spec.n, grid.steps, grid.dt
    w = co.weights
    uu = _control_path(u, K, spec.m)
    u01, dW1, dW2, dW3 = _draw_p(seed, M, L, K, dt, threads)
    theta = law.sample_from_uniforms(u01).astype(np.int64)
    comp_nodes = np.tile(np.arange(L, dtype=np.int64), M)
    xi = np.asarray(spec.xi, dtype=float)

    x1 = np.empty((K + 1, M, n))
    x2 = np.empty((K + 1, M, L, n))
    x3 = np.empty((K + 1, M, L, n))
    x1[0] = xi
    x2[0] = xi
    x3[0] = xi
    dW2c = np.repeat(dW2, L, axis=0)  # shared across a path's components
    dW3c = dW3.reshape(M * L, K)
    for k in range(K):
        m1 = x1[k].mean(axis=0)
        x1[k + 1] = _mixture_step(co, k, x1[k], theta, m1, uu[k], dt, dW1[:, k])
        m2 = np.einsum("l,pln->n", w, x2[k]) / M
        x2[k + 1] = _mixture_step(co, k, x2[k].reshape(M * L, n), comp_nodes, m2, uu[k], dt, dW2c[:, k]).reshape(M, L, n)
        m3 = np.einsum("l,pln->n", w, x3[k]) / M
        x3[k + 1] = _mixture_step(co, k, x3[k].reshape(M * L, n), comp_nodes, m3, uu[k], dt, dW3c[:, k]).reshape(M, L, n)

    mix2 = np.einsum("l,kpln->kpn", w, x2)
    mix3 = np.einsum("l,kpln->kpn", w, x3)
    out = SystemsComparison(times=grid.times, weights=w.copy())
    for name, arr in (("P1", x1), ("P2", mix2), ("P3", mix3)):
        per = np.moveaxis(arr, 0, 1)  # (M, K+1, n)
        out.mean_curves[name] = per.mean(axis=0)
        out.mean_ses[name] = _se(per)
        sq = np.sum(per * per, axis=-1)
        out.second_moments[name] = sq.mean(axis=0)
        out.ses[name] = _se(sq)

    c2 = np.moveaxis(np.sum(x2 * x2, axis=-1), 0, 1)  # (M, K+1, L)
    c3 = np.moveaxis(np.sum(x3 * x3, axis=-1), 0, 1)
    out.components["P2"] = c2.mean(axis=0).T
    out.components["P3"] = c3.mean(axis=0).T

    # E|x|^2 in P1 against the mass-weighted component moments of P2
    rhs1 = c2 @ w
    out.identities["p1_second"] = (
        out.second_moments["P1"],
        rhs1.mean(axis=0),
        np.sqrt(out.ses["P1"] ** 2 + _se(rhs1) ** 2),
    )
    rhs2 = c2 @ (w * w)
    out.identities["p3_printed"] = (
        out.second_moments["P3"],
        rhs2.mean(axis=0),
        np.sqrt(out.ses["P3"] ** 2 + _se(rhs2) ** 2),
    )
    # P3 components are independent given the deterministic mean, so the
    # cross moments factor into products of means
    mean3 = np.moveaxis(x3, 0, 1).mean(axis=0)  # (K+1, L, n)
    cross3 = np.zeros(K + 1)
    for j in range(L):
        for l in range(j + 1, L):
            cross3 += 2.0 * w[j] * w[l] * np.sum(mean3[:, j] * mean3[:, l], axis=-1)
    diag3 = c3 @ (w * w)
    out.identities["p3_exact"] = (
        out.second_moments["P3"],
        diag3.mean(axis=0) + cross3,
        np.sqrt(out.ses["P3"] ** 2 + _se(diag3) ** 2),
    )
    # exact expansion of E|x~|^2 and the version with coefficient 1 on j < l
    gram = np.einsum("kpjn,kpln->kjl", x2, x2) / M
    exact = np.einsum("j,kjl,l->k", w, gram, w)
    diag = np.einsum("j,kjj,j->k", w, gram, w)
    out.identities["p2_exact"] = (out.second_moments["P2"], exact, out.ses["P2"])
    out.components["p2_printed_cross"] = diag + 0.5 * (exact - diag)
    return out


# --------------------------------------------------------------------------
# populations
# --------------------------------------------------------------------------


def _stacked_matrices(co: CellCoefficients, k: int, w: np.ndarray):
    """Augmented-state matrices of M3 on cell ``k``: A^, B^, F (bold), C^_j, D^_j, F^_j."""
    L, n = co.A.shape[1], co.A.shape[2]
    m = co.B.shape[2]
    Ah = np.zeros((n * L, n * L))
    Bh = np.zeros((n * L, m * L))
    Fb = np.zeros((n * L, n * L))
    Cs, Ds, Fs = [], [], []
    Fm = np.concatenate([co.F[k] * w[l] for l in range(L)], axis=1)
    Ftm = np.concatenate([co.F_tilde[k] * w[l] for l in range(L)], axis=1)
    for j in range(L):
        r = slice(j * n, (j + 1) * n)
        Ah[r, r] = co.A[k, j]
        Bh[r, j * m : (j + 1) * m] = co.B[k]
        Fb[r, :] = Fm
        Cj = np.zeros((n * L, n * L))
        Cj[r, r] = co.C[k]
        Dj = np.zeros((n * L, m * L))
        Dj[r, j * m : (j + 1) * m] = co.D[k, j]
        Fj = np.zeros((n * L, n * L))
        Fj[r, :] = Ftm
        Cs.append(Cj)
        Ds.append(Dj)
        Fs.append(Fj)
    return Ah, Bh, Fb, Cs, Ds, Fs


def _m3_components(co, grid, uu, xi, dW, R, N):
    """M3 by components: x_{i,j} driven by W_{i,j}.  dW (R, N, L, K); returns (K+1, R*N, L, n)."""
    L, n = co.A.shape[1], co.A.shape[2]
    K, dt = grid.steps, grid.dt
    w = co.weights
    P = R * N
    x = np.empty((K + 1, P, L, n))
    x[0] = xi
    dWf = dW.reshape(P, L, K)
    for k in range(K):
        ybar = x[k].reshape(R, N, L * n).mean(axis=1)  # (R, L n)
        rows = np.repeat(ybar, N, axis=0)
        Fm = np.concatenate([co.F[k] * w[l] for l in range(L)], axis=1)
        Ftm = np.concatenate([co.F_tilde[k] * w[l] for l in range(L)], axis=1)
        u = np.broadcast_to(uu[k], (P, uu.shape[1]))
        for j in range(L):
            xj = x[k][:, j]
            drift = _rowmat(xj, co.A[k, j]) + _rowmat(u, co.B[k]) + _rowmat(rows, Fm)
            diff = _rowmat(xj, co.C[k]) + _rowmat(u, co.D[k, j]) + _rowmat(rows, Ftm)
            x[k + 1][:, j] = xj + drift * dt + diff * dWf[:, j, k][:, None]
    return x


def _m3_stacked(co, grid, uu, xi, dW, R, N):
    """M3 through the augmented state y_i = (x_{i,1}, ..., x_{i,L})."""
    L, n = co.A.shape[1], co.A.shape[2]
    K, dt = grid.steps, grid.dt
    w = co.weights
    P = R * N
    y = np.empty((K + 1, P, L * n))
    y[0] = np.tile(xi, L)
    dWf = dW.reshape(P, L, K)
    for k in range(K):
        Ah, Bh, Fb, Cs, Ds, Fs = _stacked_matrices(co, k, w)
        ybar = y[k].reshape(R, N, L * n).mean(axis=1)
        rows = np.repeat(ybar, N, axis=0)
        uh = np.broadcast_to(np.tile(uu[k], L), (P, L * uu.shape[1]))
        drift = _rowmat(y[k], Ah) + _rowmat(uh, Bh) + _rowmat(rows, Fb)
        noise = None
        for j in range(L):
            g = (_rowmat(y[k], Cs[j]) + _rowmat(uh, Ds[j]) + _rowmat(rows, Fs[j])) * dWf[:, j, k][:, None]
            noise = g if noise is None else noise + g
        y[k + 1] = y[k] + drift * dt + noise
    return y


def m3_stacked_check(
    spec: ModelSpec, u, N: int, grid: TimeGrid, seed: int, replications: int = 4
) -> tuple[bool, np.ndarray, np.ndarray]:
    """Simulate M3 by components and through the augmented state on the same noise.

    Returns (bitwise equal, components (K+1, R N, L, n), stacked (K+1, R N, L n)).
    """
    require_valid(spec)
    co = tabulate(spec, grid.times)
    L, K = spec.diversity.n_nodes, grid.steps
    uu = _control_path(u, K, spec.m)
    xi = np.asarray(spec.xi, dtype=float)
    sq = np.sqrt(grid.dt)
    dW = np.empty((replications, N, L, K))
    for r in range(replications):
        dW[r] = substream(seed, TAG_MSYSTEMS, r).standard_normal((N, L, K)) * sq
    comp = _m3_components(co, grid, uu, xi, dW, replications, N)
    stacked = _m3_stacked(co, grid, uu, xi, dW, replications, N)
    flat = comp.reshape(K + 1, replications * N, L * spec.n)
    return bool(np.array_equal(flat, stacked)), comp, stacked


def _population_avg(co, grid, uu, xi, x0_nodes, dW, R, N, mix_w):
    """Agents with rows ``x0_nodes`` (R*N*c,) sharing noise rows; ``mix_w`` mixes c components per agent."""
    K, dt = grid.steps, grid.dt
    c = mix_w.size
    P = R * N * c
    n = xi.size
    x = np.tile(xi, (P, 1))
    avg = np.empty((R, K + 1, n))

    def agent_avg(x):
        agents = np.einsum("c,pcn->pn", mix_w, x.reshape(R * N, c, n))
        return agents.reshape(R, N, n).mean(axis=1)

    avg[:, 0] = agent_avg(x)
    for k in range(K):
        rows = np.repeat(avg[:, k], N * c, axis=0)
        u = np.broadcast_to(uu[k], (P, uu.shape[1]))
        drift = _rowmat(u, co.B[k]) + _rowmat(rows, co.F[k])
        diff = _rowmat_nodes(u, co.D[k], x0_nodes) + _rowmat(rows, co.F_tilde[k])
        x = kernels.euler_step(x, x0_nodes, co.A[k], co.C[k], drift, diff, dt, dW[:, k])
        avg[:, k + 1] = agent_avg(x)
    return avg


def simulate_m_systems(
    spec: ModelSpec,
    u,
    N: int,
    grid: TimeGrid,
    seed: int,
    replications: int = 64,
    *,
    systems=M_SYSTEMS,
    threads: int | None = None,
) -> SystemsComparison:
    """Empirical state averages of the populations M1, M2, M3 and M under the control path ``u``.

    M1 draws each agent's node, M2 mixes one copy per node on the agent's
    Brownian motion, M3 mixes copies with independent Brownian motions and
    M assigns nodes by largest-remainder counts.  Each system uses its own
    independent noise.
    """
    require_valid(spec)
    if N < 1 or replications < 2:
        raise ModelError("need N >= 1 and at least two replications")
    law = spec.diversity
    if "M3" in systems and law.kind == "continuum":
        raise ModelError("M3 is not defined for a continuum diversity law")
    co = tabulate(spec, grid.times)
    L, K, dt = law.n_nodes, grid.steps, grid.dt
    w = co.weights
    uu = _control_path(u, K, spec.m)
    xi = np.asarray(spec.xi, dtype=float)
    sq = np.sqrt(dt)
    R = replications
    out = SystemsComparison(times=grid.times, weights=w.copy(), N=N)
    res = {s: np.empty((R, K + 1, spec.n)) for s in systems}
    one = np.ones(1)
    prop = law.proportional_types(N).astype(np.int64)
    nodes_all = np.arange(L, dtype=np.int64)

    def job(r0: int, r1: int) -> None:
        for r in range(r0, r1):
            g = substream(seed, TAG_MSYSTEMS, r)
            u01 = g.random(N)
            dW1 = g.standard_normal((N, K)) * sq
            dW2 = g.standard_normal((N, K)) * sq
            dW3 = g.standard_normal((N, L, K)) * sq
            dWm = g.standard_normal((N, K)) * sq
            if "M1" in res:
                th = law.sample_from_uniforms(u01).astype(np.int64)
                res["M1"][r] = _population_avg(co, grid, uu, xi, th, dW1, 1, N, one)[0]
            if "M2" in res:
                res["M2"][r] = _population_avg(
                    co, grid, uu, xi, np.tile(nodes_all, N), np.repeat(dW2, L, axis=0), 1, N, w
                )[0]
            if "M3" in res:
                comp = _m3_components(co, grid, uu, xi, dW3[None], 1, N)  # (K+1, N, L, n)
                res["M3"][r] = np.einsum("l,kpln->kn", w, comp) / N
            if "M" in res:
                res["M"][r] = _population_avg(co, grid, uu, xi, prop, dWm, 1, N, one)[0]

    parallel_fill(R, job, threads)
    for s, arr in res.items():
        out.population_averages[s] = arr
        out.mean_curves[s] = arr.mean(axis=0)
        out.mean_ses[s] = _se(arr)
    return out


def average_discrepancy(cmp: SystemsComparison, a: str, b: str) -> float:
    """Replication mean of max over grid times of |avg_a - avg_b|^2."""
    d = cmp.population_averages[a] - cmp.population_averages[b]
    return float(np.mean(np.max(np.sum(d * d, axis=-1), axis=1)))
