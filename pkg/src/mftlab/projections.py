"""The two projections of the optimal control: R-weighted projection onto the
control set and conditional expectation onto the agent's information.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import EPS_R, ConstraintSpec, InfoPattern, ModelError
from .stochastics import PathEnsemble, TimeGrid


# --------------------------------------------------------------------------
# projection onto the control set
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightedProjection:
    """Metric projection onto ``constraint`` under the norm ``|v|_R^2 = v^T R v``."""

    R: np.ndarray
    constraint: ConstraintSpec

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if R.shape[0] != R.shape[1] or not np.allclose(R, R.T, atol=1e-12):
            raise ModelError("R must be a symmetric square matrix")
        if np.linalg.eigvalsh(R).min() < EPS_R:
            raise ModelError("R not >> 0")
        object.__setattr__(self, "R", R)

    @property
    def m(self) -> int:
        return self.R.shape[0]


def project_batch(p: WeightedProjection, V: np.ndarray) -> np.ndarray:
    """Project every row of ``V`` (shape (P, m))."""
    V = np.asarray(V, dtype=float)
    if p.constraint.kind == "full":
        return V.copy()
    lo, hi = p.constraint.bounds(p.m)
    return kernels.project_box_batch(V, p.R, lo, hi)


def project_gamma(p: WeightedProjection, v) -> np.ndarray:
    """argmin over w in the control set of |v - w|_R."""
    v = np.asarray(v, dtype=float).reshape(1, -1)
    return project_batch(p, v)[0]


# --------------------------------------------------------------------------
# least-squares regression by diversity group
# --------------------------------------------------------------------------


def colmean(X: np.ndarray) -> np.ndarray:
    """Column means of a tall 2-D array (a BLAS matrix-vector product)."""
    X = np.asarray(X)
    return (np.ones(X.shape[0]) @ X) / X.shape[0]


def state_basis(x: np.ndarray) -> np.ndarray:
    """Columns ``1, x_i, x_i x_j (i <= j)`` for rows of ``x`` (P, n)."""
    P, n = x.shape
    cols = [np.ones(P)] + [x[:, i] for i in range(n)]
    for i in range(n):
        for j in range(i, n):
            cols.append(x[:, i] * x[:, j])
    return np.column_stack(cols)


def lag_basis(w: np.ndarray) -> np.ndarray:
    """Columns ``1, w, w^2`` of a lagged Brownian value."""
    return np.column_stack([np.ones_like(w), w, w * w])


@dataclass
class GroupFit:
    """Per-group regression coefficients, shape (groups, basis, targets)."""

    coef: np.ndarray

    def evaluate(self, X: np.ndarray, groups: np.ndarray) -> np.ndarray:
        return np.einsum("pb,pbq->pq", X, self.coef[groups])


def group_regression(X: np.ndarray, groups: np.ndarray, n_groups: int, Y: np.ndarray) -> tuple[np.ndarray, GroupFit]:
    """Least squares of ``Y`` on ``X`` separately inside each group.

    Column 0 of ``X`` must be the constant.  The other columns are centred
    and scaled to unit root-mean-square before the normal equations are
    solved, so group means of ``Y`` are reproduced exactly.  Columns whose
    centred spread is at rounding level (for example a state that is
    identical on every path) are dropped, and directions with relative
    eigenvalue below 1e-13 are cut, giving the minimum-norm coefficients.
    Groups with no rows get zero coefficients.
    """
    Y2 = Y.reshape(Y.shape[0], -1)
    b = X.shape[1]
    coef = np.zeros((n_groups, b, Y2.shape[1]))
    single = n_groups == 1
    fitted = np.empty_like(Y2) if not single else None
    for g in range(n_groups):
        if single:
            rows, Xg, Yg = None, X, Y2
        else:
            rows = np.flatnonzero(groups == g)
            if rows.size == 0:
                continue
            Xg, Yg = X[rows], Y2[rows]
        cnt = Xg.shape[0]
        if cnt < b:
            raise ModelError(f"regression underdetermined: group {g} has {cnt} paths for {b} basis functions")
        ybar = colmean(Yg)
        c = np.zeros((b, Y2.shape[1]))
        if b > 1:
            mu = colmean(Xg[:, 1:])
            Xc = Xg[:, 1:] - mu
            spread = np.sqrt(np.diag(Xc.T @ Xc) / cnt)
            size = np.sqrt(spread**2 + mu**2)
            keep = spread > 1e-11 * np.maximum(size, 1e-300)
            if keep.any():
                Xk = Xc[:, keep] / spread[keep]
                G = Xk.T @ Xk
                rhs = Xk.T @ (Yg - ybar)
                sol, *_ = np.linalg.lstsq(G, rhs, rcond=1e-13)
                c[1:][keep] = sol / spread[keep][:, None]
            c[0] = ybar - mu @ c[1:]
            fit = ybar + Xc @ c[1:]
        else:
            c[0] = ybar
            fit = np.broadcast_to(ybar, Yg.shape)
        coef[g] = c
        if single:
            fitted = np.array(fit)
        else:
            fitted[rows] = fit
    return fitted.reshape(Y.shape), GroupFit(coef)


# --------------------------------------------------------------------------
# conditional expectation onto the information pattern
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionalExpectationEstimator:
    """Sample conditional expectation for an open-loop information pattern.

    Full information leaves adapted values unchanged, trivial information
    replaces values by their sample mean, and delayed information regresses
    on ``1, W(t - delay), W(t - delay)^2`` inside each diversity group.
    """

    pattern: InfoPattern
    basis: str = "quadratic-lagged-brownian"


def lag_index(pattern: InfoPattern, grid: TimeGrid, t_index: int) -> int | None:
    """Grid index of the observed Brownian value, or None when nothing but the type is known."""
    if pattern.kind != "delayed":
        return t_index
    s = grid.times[t_index] - pattern.delay
    if s <= 1e-12 * grid.T:
        return None
    j = int(np.floor(s / grid.dt + 1e-9))
    return j if j > 0 else None


def info_features(pattern: InfoPattern, grid: TimeGrid, W: np.ndarray, t_index: int) -> np.ndarray | None:
    j = lag_index(pattern, grid, t_index)
    return None if j is None else W[:, j]


@dataclass
class ConditionedField:
    """Fitted conditional expectation, reusable on fresh agents."""

    kind: str
    mean: np.ndarray | None = None  # trivial
    fit: GroupFit | None = None  # delayed

    def evaluate(self, values_if_full: np.ndarray | None, theta: np.ndarray, features: np.ndarray | None) -> np.ndarray:
        if self.kind == "full":
            return values_if_full
        if self.kind == "trivial":
            return np.broadcast_to(self.mean, (theta.shape[0], self.mean.shape[0])).copy()
        X = np.ones((theta.shape[0], 1)) if features is None else lag_basis(features)
        return self.fit.evaluate(X, theta)


def fit_condition(
    est: ConditionalExpectationEstimator,
    values: np.ndarray,
    theta: np.ndarray,
    n_groups: int,
    features: np.ndarray | None,
) -> tuple[np.ndarray, ConditionedField]:
    kind = est.pattern.kind
    if kind == "full":
        return values, ConditionedField("full")
    if kind == "trivial":
        mu = values.mean(axis=0)
        return np.broadcast_to(mu, values.shape).copy(), ConditionedField("trivial", mean=mu)
    X = np.ones((values.shape[0], 1)) if features is None else lag_basis(features)
    fitted, gf = group_regression(X, theta, n_groups, values)
    return fitted, ConditionedField("delayed", fit=gf)


def condition(
    est: ConditionalExpectationEstimator,
    ensemble: PathEnsemble,
    t_index: int,
    values,
    features: np.ndarray | None = None,
) -> np.ndarray:
    """Project per-path ``values`` (M, q) onto the information available at ``t_index``.

    ``features`` overrides the lagged Brownian value read from the ensemble.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != ensemble.paths:
        raise ModelError("values and ensemble differ in path count")
    if features is None and est.pattern.kind == "delayed":
        features = info_features(est.pattern, ensemble.grid, ensemble.W, t_index)
    out, _ = fit_condition(est, values, ensemble.theta, ensemble.law.n_nodes, features)
    return out
