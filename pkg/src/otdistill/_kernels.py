"""Hot numeric loops behind the iterative solvers.

Every kernel exists twice: a ``*_loops`` variant written as explicit loops
and compiled with ``numba.njit`` when the numba backend is active, and a
vectorized ``*_numpy`` twin. The module-level names without a suffix are
bound to whichever variant the active backend selects; the suffixed names
stay importable so the benchmark can time both.

Kernels return a status code instead of raising: 0 = ok, 1 = numerical
underflow (a kernel row/column collapsed to zero in working precision).
The wrappers in :mod:`otdistill.solvers` translate status into exceptions.
"""

import numpy as np

from .backend import NUMBA_ENABLED, maybe_njit

OK = 0
UNDERFLOW = 1


# ---------------------------------------------------------------------------
# REMD: one pass over the cost matrix
# ---------------------------------------------------------------------------

def remd_minsums_numpy(C):
    """Sum of row-wise minima and sum of column-wise minima of C."""
    return float(C.min(axis=1).sum()), float(C.min(axis=0).sum())


def _remd_minsums_loops(C):
    b_rows, b_cols = C.shape
    row_sum = 0.0
    for i in range(b_rows):
        m = C[i, 0]
        for j in range(1, b_cols):
            if C[i, j] < m:
                m = C[i, j]
        row_sum += m
    col_sum = 0.0
    for j in range(b_cols):
        m = C[0, j]
        for i in range(1, b_rows):
            if C[i, j] < m:
                m = C[i, j]
        col_sum += m
    return row_sum, col_sum


remd_minsums_loops = maybe_njit(_remd_minsums_loops)


# ---------------------------------------------------------------------------
# IPOT proximal point iterations
# ---------------------------------------------------------------------------

def ipot_iterate_numpy(C, mu, nu, beta, n_iters, inner_steps):
    """Proximal-point transport iterations with kernel exp(-C/beta).

    Starts from v = (1/b) 1, T = 1 1^T and performs ``n_iters`` outer
    steps of Q = G * T, ``inner_steps`` Sinkhorn sweeps on Q, then
    T = diag(u) Q diag(v). Returns (T, row_violation, status). Column
    marginals of the returned plan match nu exactly by construction; the
    violation is the L1 gap on the row marginal.
    """
    b = C.shape[0]
    G = np.exp(-C / beta)
    T = np.ones((b, b))
    v = np.full(b, 1.0 / b)
    u = np.full(b, 1.0 / b)
    for _ in range(n_iters):
        Q = G * T
        for _ in range(inner_steps):
            qv = Q @ v
            if not np.all(np.isfinite(qv)) or np.any(qv == 0.0):
                return T, np.inf, UNDERFLOW
            u = mu / qv
            qu = Q.T @ u
            if not np.all(np.isfinite(qu)) or np.any(qu == 0.0):
                return T, np.inf, UNDERFLOW
            v = nu / qu
        T = u[:, None] * Q * v[None, :]
    violation = float(np.abs(T.sum(axis=1) - mu).sum())
    return T, violation, OK


def _ipot_iterate_loops(C, mu, nu, beta, n_iters, inner_steps):
    b = C.shape[0]
    G = np.exp(-C / beta)
    T = np.ones((b, b))
    v = np.full(b, 1.0 / b)
    u = np.full(b, 1.0 / b)
    qv = np.empty(b)
    qu = np.empty(b)
    for _ in range(n_iters):
        Q = G * T
        for _ in range(inner_steps):
            for i in range(b):
                s = 0.0
                for j in range(b):
                    s += Q[i, j] * v[j]
                qv[i] = s
            for i in range(b):
                if not np.isfinite(qv[i]) or qv[i] == 0.0:
                    return T, np.inf, UNDERFLOW
                u[i] = mu[i] / qv[i]
            for j in range(b):
                s = 0.0
                for i in range(b):
                    s += Q[i, j] * u[i]
                qu[j] = s
            for j in range(b):
                if not np.isfinite(qu[j]) or qu[j] == 0.0:
                    return T, np.inf, UNDERFLOW
                v[j] = nu[j] / qu[j]
        for i in range(b):
            for j in range(b):
                T[i, j] = u[i] * Q[i, j] * v[j]
    violation = 0.0
    for i in range(b):
        s = 0.0
        for j in range(b):
            s += T[i, j]
        violation += abs(s - mu[i])
    return T, violation, OK


ipot_iterate_loops = maybe_njit(_ipot_iterate_loops)


# ---------------------------------------------------------------------------
# Sinkhorn, standard domain
# ---------------------------------------------------------------------------

def sinkhorn_iterate_numpy(K, mu, nu, max_iters, tol):
    """Alternating scaling of the positive kernel K = exp(-C/eps).

    Each iteration enforces the row marginal then the column marginal;
    convergence is declared when the L1 violation of the row marginal
    (the one left un-enforced) drops to ``tol``. Returns
    (T, iters, converged, violation, status).
    """
    b = K.shape[0]
    u = np.full(b, 1.0 / b)
    v = np.full(b, 1.0 / b)
    violation = np.inf
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        kv = K @ v
        if not np.all(np.isfinite(kv)) or np.any(kv == 0.0):
            return np.empty((b, b)), it, False, np.inf, UNDERFLOW
        u = mu / kv
        ku = K.T @ u
        if not np.all(np.isfinite(ku)) or np.any(ku == 0.0):
            return np.empty((b, b)), it, False, np.inf, UNDERFLOW
        v = nu / ku
        row = u * (K @ v)
        violation = float(np.abs(row - mu).sum())
        if violation <= tol:
            converged = True
            break
    T = u[:, None] * K * v[None, :]
    if not np.all(np.isfinite(T)):
        return T, it, False, np.inf, UNDERFLOW
    return T, it, converged, violation, OK


def _sinkhorn_iterate_loops(K, mu, nu, max_iters, tol):
    b = K.shape[0]
    u = np.full(b, 1.0 / b)
    v = np.full(b, 1.0 / b)
    violation = np.inf
    converged = False
    it = 0
    T = np.empty((b, b))
    for it in range(1, max_iters + 1):
        for i in range(b):
            s = 0.0
            for j in range(b):
                s += K[i, j] * v[j]
            if not np.isfinite(s) or s == 0.0:
                return T, it, False, np.inf, UNDERFLOW
            u[i] = mu[i] / s
        for j in range(b):
            s = 0.0
            for i in range(b):
                s += K[i, j] * u[i]
            if not np.isfinite(s) or s == 0.0:
                return T, it, False, np.inf, UNDERFLOW
            v[j] = nu[j] / s
        violation = 0.0
        for i in range(b):
            s = 0.0
            for j in range(b):
                s += K[i, j] * v[j]
            violation += abs(u[i] * s - mu[i])
        if violation <= tol:
            converged = True
            break
    for i in range(b):
        for j in range(b):
            T[i, j] = u[i] * K[i, j] * v[j]
            if not np.isfinite(T[i, j]):
                return T, it, False, np.inf, UNDERFLOW
    return T, it, converged, violation, OK


sinkhorn_iterate_loops = maybe_njit(_sinkhorn_iterate_loops)


# ---------------------------------------------------------------------------
# Sinkhorn, log domain
# ---------------------------------------------------------------------------

def sinkhorn_log_iterate_numpy(C, log_mu, log_nu, eps, max_iters, tol):
    """Log-domain Sinkhorn on potentials f, g with T = exp((f+g-C)/eps).

    Same fixed point and stopping rule as the standard-domain kernel but
    immune to kernel underflow at small eps. Non-finite potentials (eps
    at the subnormal floor) are the handled failure path, so float
    warnings are silenced here.
    """
    b = C.shape[0]
    f = np.zeros(b)
    g = np.zeros(b)
    violation = np.inf
    converged = False
    it = 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for it in range(1, max_iters + 1):
            A = (g[None, :] - C) / eps
            m = A.max(axis=1)
            f = eps * (log_mu - (m + np.log(np.exp(A - m[:, None]).sum(axis=1))))
            A = (f[:, None] - C) / eps
            m = A.max(axis=0)
            g = eps * (log_nu - (m + np.log(np.exp(A - m[None, :]).sum(axis=0))))
            if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
                return np.empty((b, b)), it, False, np.inf, UNDERFLOW
            row = np.exp((f[:, None] + g[None, :] - C) / eps).sum(axis=1)
            violation = float(np.abs(row - np.exp(log_mu)).sum())
            if violation <= tol:
                converged = True
                break
        T = np.exp((f[:, None] + g[None, :] - C) / eps)
    return T, it, converged, violation, OK


def _sinkhorn_log_iterate_loops(C, log_mu, log_nu, eps, max_iters, tol):
    b = C.shape[0]
    f = np.zeros(b)
    g = np.zeros(b)
    violation = np.inf
    converged = False
    it = 0
    T = np.empty((b, b))
    for it in range(1, max_iters + 1):
        for i in range(b):
            m = -np.inf
            for j in range(b):
                a = (g[j] - C[i, j]) / eps
                if a > m:
                    m = a
            s = 0.0
            for j in range(b):
                s += np.exp((g[j] - C[i, j]) / eps - m)
            f[i] = eps * (log_mu[i] - (m + np.log(s)))
        for j in range(b):
            m = -np.inf
            for i in range(b):
                a = (f[i] - C[i, j]) / eps
                if a > m:
                    m = a
            s = 0.0
            for i in range(b):
                s += np.exp((f[i] - C[i, j]) / eps - m)
            g[j] = eps * (log_nu[j] - (m + np.log(s)))
        bad = False
        for i in range(b):
            if not (np.isfinite(f[i]) and np.isfinite(g[i])):
                bad = True
        if bad:
            return T, it, False, np.inf, UNDERFLOW
        violation = 0.0
        for i in range(b):
            s = 0.0
            for j in range(b):
                s += np.exp((f[i] + g[j] - C[i, j]) / eps)
            violation += abs(s - np.exp(log_mu[i]))
        if violation <= tol:
            converged = True
            break
    for i in range(b):
        for j in range(b):
            T[i, j] = np.exp((f[i] + g[j] - C[i, j]) / eps)
    return T, it, converged, violation, OK


sinkhorn_log_iterate_loops = maybe_njit(_sinkhorn_log_iterate_loops)


# ---------------------------------------------------------------------------
# Active-backend bindings
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:
    remd_minsums = remd_minsums_loops
    ipot_iterate = ipot_iterate_loops
    sinkhorn_iterate = sinkhorn_iterate_loops
    sinkhorn_log_iterate = sinkhorn_log_iterate_loops
else:
    remd_minsums = remd_minsums_numpy
    ipot_iterate = ipot_iterate_numpy
    sinkhorn_iterate = sinkhorn_iterate_numpy
    sinkhorn_log_iterate = sinkhorn_log_iterate_numpy

KERNEL_VARIANTS = {
    "numpy": {
        "remd": remd_minsums_numpy,
        "ipot": ipot_iterate_numpy,
        "sinkhorn": sinkhorn_iterate_numpy,
        "sinkhorn_log": sinkhorn_log_iterate_numpy,
    },
    "numba": {
        "remd": remd_minsums_loops,
        "ipot": ipot_iterate_loops,
        "sinkhorn": sinkhorn_iterate_loops,
        "sinkhorn_log": sinkhorn_log_iterate_loops,
    },
}
