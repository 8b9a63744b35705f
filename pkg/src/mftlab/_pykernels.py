"""Pure numpy versions of the compiled kernels (same algorithms, same summation order)."""
from __future__ import annotations

import numpy as np


def _finish(R, v, w, lo, hi, kkt_tol):
    m = v.shape[0]
    free = (w > lo) & (w < hi)
    act = ~free
    if free.any():
        rhs = -R[np.ix_(free, act)] @ (w[act] - v[act])
        try:
            L = np.linalg.cholesky(R[np.ix_(free, free)])
        except np.linalg.LinAlgError:
            return None
        d = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        wf = v[free] + d
        if np.any(wf < lo[free]) or np.any(wf > hi[free]):
            return None
        w = w.copy()
        w[free] = wf
    g = R @ (w - v)
    for i in range(m):
        if free[i]:
            continue
        if w[i] <= lo[i] and g[i] < -kkt_tol:
            return None
        if w[i] >= hi[i] and g[i] > kkt_tol:
            return None
    return w


def project_box_batch(V, R, lo, hi, tol: float = 1e-15, max_sweeps: int = 20000):
    """Row-wise argmin over the box of (w - v)^T R (w - v)."""
    V = np.ascontiguousarray(V, dtype=float)
    R = np.ascontiguousarray(R, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    W = np.clip(V, lo, hi)
    m = V.shape[1]
    if np.count_nonzero(R - np.diag(np.diag(R))) == 0:
        return W
    inside = np.all((V >= lo) & (V <= hi), axis=1)
    todo = np.flatnonzero(~inside)
    if todo.size == 0:
        return W
    Vt, Wt = V[todo], W[todo].copy()
    done = np.zeros(todo.size, dtype=bool)
    for sweep in range(max_sweeps):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        change = np.zeros(active.size)
        scale = np.ones(active.size)
        for i in range(m):
            g = np.zeros(active.size)
            for j in range(m):
                if j != i:
                    g = g + R[i, j] * (Wt[active, j] - Vt[active, j])
            new = np.clip(Vt[active, i] - g / R[i, i], lo[i], hi[i])
            change = np.maximum(change, np.abs(new - Wt[active, i]))
            scale = np.maximum(scale, np.abs(new))
            Wt[active, i] = new
        check = (sweep % 8 == 7) | (change <= tol * scale)
        for a in np.flatnonzero(check):
            r = active[a]
            w = _finish(R, Vt[r], Wt[r], lo, hi, 1e-13 * scale[a] * (1.0 + R[0, 0]))
            if w is not None:
                Wt[r] = w
                done[r] = True
        done[active[change <= tol * scale * 1e-3]] = True
    W[todo] = Wt
    return W


def euler_step(x, node, A, C, drift, diff, dt, dw):
    """x + (A[node] x + drift) dt + (C x + diff) dw, row by row."""
    x = np.asarray(x, dtype=float)
    n = x.shape[1]
    An = A[node]
    a = np.zeros_like(x)
    c = np.zeros_like(x)
    for j in range(n):
        a = a + An[:, :, j] * x[:, j : j + 1]
        c = c + C[None, :, j] * x[:, j : j + 1]
    return x + (a + drift) * dt + (c + diff) * dw[:, None]
