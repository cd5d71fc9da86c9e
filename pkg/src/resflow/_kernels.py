"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with the same signature.  The active
implementation is chosen once at import time from ``RESFLOW_BACKEND``
("numba" or "numpy"; default numba when it imports).  Both twins are always
importable as ``<name>_numba`` / ``<name>_numpy`` so tests and the benchmark
can compare them directly.

Dense matrix products stay in numpy: BLAS beats anything hand-jitted here.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

BACKEND = os.environ.get("RESFLOW_BACKEND", "numba" if HAVE_NUMBA else "numpy").lower()
if BACKEND not in ("numba", "numpy"):
    raise ImportError(f"RESFLOW_BACKEND must be 'numba' or 'numpy', got {BACKEND!r}")
if BACKEND == "numba" and not HAVE_NUMBA:
    BACKEND = "numpy"


# ---------------------------------------------------------------------------
# pure numpy
# ---------------------------------------------------------------------------

def sqdist_matrix_numpy(x, y):
    # fixed evaluation order ((dx^2 + dy^2) + dz^2) so every path agrees bitwise
    dx = x[:, 0, None] - y[None, :, 0]
    dy = x[:, 1, None] - y[None, :, 1]
    dz = x[:, 2, None] - y[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def nearest_bruteforce_numpy(x, y):
    d = sqdist_matrix_numpy(x, y)
    idx = np.argmin(d, axis=1)  # first occurrence -> lowest index on ties
    return idx, d[np.arange(len(x)), idx]


def _lse_rows(M):
    mx = M.max(axis=1)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    return mx + np.log(np.exp(M - mx[:, None]).sum(axis=1))


def sinkhorn_log_numpy(C, log_a, log_b, eps, min_iters, max_iters, tol, f0, g0):
    # Each sweep opens with the row log-sum-exp; it gives both the next row
    # potential and the row marginals of the current plan, so the violation
    # check costs nothing extra.
    f = f0.copy()
    g = g0.copy()
    viol = np.inf
    it = 0
    while True:
        rows = _lse_rows(log_b[None, :] + (g[None, :] - C) / eps)
        if it > 0:
            viol = (np.exp(log_a) * np.abs(np.expm1(f / eps + rows))).sum()
            if (it >= min_iters and viol < tol) or it >= max_iters:
                break
        elif max_iters <= 0:
            break
        f = -eps * rows
        g = -eps * _lse_rows((log_a[:, None] + (f[:, None] - C) / eps).T)
        it += 1
    return f, g, it, viol


# ---------------------------------------------------------------------------
# numba
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def sqdist_matrix_numba(x, y):
        n1 = x.shape[0]
        n2 = y.shape[0]
        out = np.empty((n1, n2))
        for i in range(n1):
            for j in range(n2):
                dx = x[i, 0] - y[j, 0]
                dy = x[i, 1] - y[j, 1]
                dz = x[i, 2] - y[j, 2]
                out[i, j] = dx * dx + dy * dy + dz * dz
        return out

    @njit(cache=True)
    def nearest_bruteforce_numba(x, y):
        n1 = x.shape[0]
        n2 = y.shape[0]
        idx = np.empty(n1, dtype=np.int64)
        best = np.empty(n1)
        for i in range(n1):
            bi = 0
            bd = np.inf
            for j in range(n2):
                dx = x[i, 0] - y[j, 0]
                dy = x[i, 1] - y[j, 1]
                dz = x[i, 2] - y[j, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < bd:
                    bd = d
                    bi = j
            idx[i] = bi
            best[i] = bd
        return idx, best

    @njit(cache=True)
    def _row_lse(C, pot, log_w, inv_eps, out):
        # out[i] = logsumexp_j(log_w[j] + (pot[j] - C[i, j]) / eps)
        n1, n2 = C.shape
        for i in range(n1):
            mx = -np.inf
            for j in range(n2):
                v = log_w[j] + (pot[j] - C[i, j]) * inv_eps
                if v > mx:
                    mx = v
            s = 0.0
            for j in range(n2):
                s += np.exp(log_w[j] + (pot[j] - C[i, j]) * inv_eps - mx)
            out[i] = mx + np.log(s)

    @njit(cache=True)
    def sinkhorn_log_numba(C, log_a, log_b, eps, min_iters, max_iters, tol, f0, g0):
        n1, n2 = C.shape
        CT = np.ascontiguousarray(C.T)
        inv_eps = 1.0 / eps
        f = f0.copy()
        g = g0.copy()
        rows = np.empty(n1)
        cols = np.empty(n2)
        viol = np.inf
        it = 0
        while True:
            _row_lse(C, g, log_b, inv_eps, rows)
            if it > 0:
                viol = 0.0
                for i in range(n1):
                    viol += np.exp(log_a[i]) * abs(np.expm1(f[i] * inv_eps + rows[i]))
                if (it >= min_iters and viol < tol) or it >= max_iters:
                    break
            elif max_iters <= 0:
                break
            for i in range(n1):
                f[i] = -eps * rows[i]
            _row_lse(CT, f, log_a, inv_eps, cols)
            for j in range(n2):
                g[j] = -eps * cols[j]
            it += 1
        return f, g, it, viol

else:  # pragma: no cover
    sqdist_matrix_numba = sqdist_matrix_numpy
    nearest_bruteforce_numba = nearest_bruteforce_numpy
    sinkhorn_log_numba = sinkhorn_log_numpy


if BACKEND == "numba":
    sqdist_matrix = sqdist_matrix_numba
    nearest_bruteforce = nearest_bruteforce_numba
    sinkhorn_log = sinkhorn_log_numba
else:
    sqdist_matrix = sqdist_matrix_numpy
    nearest_bruteforce = nearest_bruteforce_numpy
    sinkhorn_log = sinkhorn_log_numpy
