# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: batched R-weighted box projection and node-indexed Euler steps."""
import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, sqrt, INFINITY

cnp.import_array()


cdef inline double _clip(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


cdef bint _finish(const double[:, ::1] R, const double[::1] v, double[::1] w,
                  const double[::1] lo, const double[::1] hi, double[:, ::1] S,
                  double[::1] rhs, Py_ssize_t[::1] free, double kkt_tol) nogil:
    """Solve exactly on the current active set and accept if KKT holds."""
    cdef Py_ssize_t m = v.shape[0]
    cdef Py_ssize_t i, j, k, a, b, nf = 0
    cdef double s, g
    for i in range(m):
        if w[i] > lo[i] and w[i] < hi[i]:
            free[nf] = i
            nf += 1
    # rhs_F = -R_FA (w_A - v_A) ; solve R_FF d = rhs ; w_F = v_F + d
    for a in range(nf):
        i = free[a]
        s = 0.0
        for j in range(m):
            if not (w[j] > lo[j] and w[j] < hi[j]):
                s -= R[i, j] * (w[j] - v[j])
        rhs[a] = s
        for b in range(nf):
            S[a, b] = R[i, free[b]]
    # Cholesky in place (lower)
    for a in range(nf):
        s = S[a, a]
        for k in range(a):
            s -= S[a, k] * S[a, k]
        if s <= 0.0:
            return False
        S[a, a] = sqrt(s)
        for b in range(a + 1, nf):
            s = S[b, a]
            for k in range(a):
                s -= S[b, k] * S[a, k]
            S[b, a] = s / S[a, a]
    for a in range(nf):
        s = rhs[a]
        for k in range(a):
            s -= S[a, k] * rhs[k]
        rhs[a] = s / S[a, a]
    for a in range(nf - 1, -1, -1):
        s = rhs[a]
        for k in range(a + 1, nf):
            s -= S[k, a] * rhs[k]
        rhs[a] = s / S[a, a]
    for a in range(nf):
        i = free[a]
        s = v[i] + rhs[a]
        if s < lo[i] or s > hi[i]:
            return False
    for a in range(nf):
        w[free[a]] = v[free[a]] + rhs[a]
    for i in range(m):
        if w[i] > lo[i] and w[i] < hi[i]:
            continue
        g = 0.0
        for j in range(m):
            g += R[i, j] * (w[j] - v[j])
        if w[i] <= lo[i] and g < -kkt_tol:
            return False
        if w[i] >= hi[i] and g > kkt_tol:
            return False
    return True


def project_box_batch(cnp.ndarray V_in, cnp.ndarray R_in, cnp.ndarray lo_in, cnp.ndarray hi_in,
                      double tol=1e-15, int max_sweeps=20000):
    """Row-wise argmin over the box of (w - v)^T R (w - v)."""
    cdef double[:, ::1] V = np.ascontiguousarray(V_in, dtype=np.float64)
    cdef double[:, ::1] R = np.ascontiguousarray(R_in, dtype=np.float64)
    cdef double[::1] lo = np.ascontiguousarray(lo_in, dtype=np.float64)
    cdef double[::1] hi = np.ascontiguousarray(hi_in, dtype=np.float64)
    cdef Py_ssize_t P = V.shape[0], m = V.shape[1]
    out_arr = np.empty((P, m), dtype=np.float64)
    cdef double[:, ::1] W = out_arr
    cdef double[:, ::1] S = np.empty((m, m), dtype=np.float64)
    cdef double[::1] rhs = np.empty(m, dtype=np.float64)
    cdef double[::1] wbuf = np.empty(m, dtype=np.float64)
    cdef Py_ssize_t[::1] free = np.empty(m, dtype=np.intp)
    cdef Py_ssize_t p, i, j, sweep
    cdef bint diag = True, inside
    cdef double g, new, change, scale, kkt_tol
    for i in range(m):
        for j in range(m):
            if i != j and R[i, j] != 0.0:
                diag = False
    with nogil:
        for p in range(P):
            inside = True
            for i in range(m):
                if V[p, i] < lo[i] or V[p, i] > hi[i]:
                    inside = False
            if inside or diag:
                for i in range(m):
                    W[p, i] = _clip(V[p, i], lo[i], hi[i])
                continue
            for i in range(m):
                W[p, i] = _clip(V[p, i], lo[i], hi[i])
            for sweep in range(max_sweeps):
                change = 0.0
                scale = 1.0
                for i in range(m):
                    g = 0.0
                    for j in range(m):
                        if j != i:
                            g += R[i, j] * (W[p, j] - V[p, j])
                    new = _clip(V[p, i] - g / R[i, i], lo[i], hi[i])
                    if fabs(new - W[p, i]) > change:
                        change = fabs(new - W[p, i])
                    if fabs(new) > scale:
                        scale = fabs(new)
                    W[p, i] = new
                if sweep % 8 == 7 or change <= tol * scale:
                    for i in range(m):
                        wbuf[i] = W[p, i]
                    kkt_tol = 1e-13 * scale * (1.0 + R[0, 0])
                    if _finish(R, V[p], wbuf, lo, hi, S, rhs, free, kkt_tol):
                        for i in range(m):
                            W[p, i] = wbuf[i]
                        break
                if change <= tol * scale * 1e-3:
                    break
    return out_arr


def euler_step(cnp.ndarray x_in, cnp.ndarray node_in, cnp.ndarray A_in, cnp.ndarray C_in,
               cnp.ndarray drift_in, cnp.ndarray diff_in, double dt, cnp.ndarray dw_in):
    """x + (A[node] x + drift) dt + (C x + diff) dw, row by row."""
    cdef double[:, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef long long[::1] node = np.ascontiguousarray(node_in, dtype=np.int64)
    cdef double[:, :, ::1] A = np.ascontiguousarray(A_in, dtype=np.float64)
    cdef double[:, ::1] C = np.ascontiguousarray(C_in, dtype=np.float64)
    cdef double[:, ::1] drift = np.ascontiguousarray(drift_in, dtype=np.float64)
    cdef double[:, ::1] diff = np.ascontiguousarray(diff_in, dtype=np.float64)
    cdef double[::1] dw = np.ascontiguousarray(dw_in, dtype=np.float64)
    cdef Py_ssize_t P = x.shape[0], n = x.shape[1]
    out_arr = np.empty((P, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, i, j
    cdef long long k
    cdef double a, c
    with nogil:
        for p in range(P):
            k = node[p]
            for i in range(n):
                a = 0.0
                c = 0.0
                for j in range(n):
                    a = a + A[k, i, j] * x[p, j]
                    c = c + C[i, j] * x[p, j]
                out[p, i] = x[p, i] + (a + drift[p, i]) * dt + (c + diff[p, i]) * dw[p]
    return out_arr
