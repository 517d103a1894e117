"""Hot numeric kernels with a numba lane and a pure-numpy fallback.

The lane is chosen once at import time: numba is used when it imports
cleanly and the environment variable ``CELLFLOW_NUMBA`` is not set to
``"0"``. Both lanes implement the same contracts; the numpy versions are
vectorized, the numba versions are explicit loops compiled with
``@njit(cache=True)``. ``benchmarks/bench_kernels.py`` compares the two.

``CELLFLOW_THREADS`` caps the numba thread pool (the kernels themselves
are single-threaded; the cap guards library-level parallelism).
"""

import os

import numpy as np

_flag = os.environ.get("CELLFLOW_NUMBA", "1").strip().lower()
USE_NUMBA = _flag not in ("0", "false", "off")

if USE_NUMBA:
    try:
        import numba
        from numba import njit
    except ImportError:
        USE_NUMBA = False

if USE_NUMBA:
    threads = os.environ.get("CELLFLOW_THREADS")
    if threads:
        try:
            numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))
        except ValueError:
            pass


# ---------------------------------------------------------------------------
# pairwise squared Euclidean distances


def _pairwise_sq_dists_np(X, Y):
    x2 = np.sum(X * X, axis=1)[:, None]
    y2 = np.sum(Y * Y, axis=1)[None, :]
    D = x2 + y2 - 2.0 * (X @ Y.T)
    np.maximum(D, 0.0, out=D)
    return D


def _pairwise_sq_dists_nb(X, Y):
    n, d = X.shape
    m = Y.shape[0]
    D = np.empty((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = X[i, k] - Y[j, k]
                acc += diff * diff
            D[i, j] = acc
    return D


# ---------------------------------------------------------------------------
# hinge density penalty: for each query point the k smallest distances to
# the data, summed after subtracting a margin


def _density_hinge_np(P, X, k, h):
    D = np.sqrt(_pairwise_sq_dists_np(P, X))
    part = np.partition(D, k - 1, axis=1)[:, :k]
    return np.sum(np.maximum(part - h, 0.0), axis=1)


def _density_hinge_nb(P, X, k, h):
    n = P.shape[0]
    m = X.shape[0]
    d = P.shape[1]
    out = np.zeros(n, dtype=np.float64)
    best = np.empty(k, dtype=np.float64)
    for i in range(n):
        # maintain the k smallest squared distances in a small buffer
        worst = 0
        for j in range(m):
            acc = 0.0
            for c in range(d):
                diff = P[i, c] - X[j, c]
                acc += diff * diff
            if j < k:
                best[j] = acc
                if best[j] > best[worst]:
                    worst = j
            elif acc < best[worst]:
                best[worst] = acc
                worst = 0
                for q in range(1, k):
                    if best[q] > best[worst]:
                        worst = q
        s = 0.0
        for q in range(k):
            v = np.sqrt(best[q]) - h
            if v > 0.0:
                s += v
        out[i] = s
    return out


# ---------------------------------------------------------------------------
# log-domain Sinkhorn sweeps in the absorbed (stabilized) form.  Balanced
# and KL-unbalanced share the kernel: fr = lam1/(lam1+eps), fc likewise,
# with fr = fc = 1 recovering the balanced update.  Weights must be > 0.


def _sinkhorn_log_sweeps_np(C, log_mu, log_nu, eps, fr, fc, n_iter, f, g):
    f = f.copy()
    g = g.copy()
    for _ in range(n_iter):
        M = (f[:, None] + g[None, :] - C) / eps
        mx = np.max(M, axis=1)
        lse = mx + np.log(np.sum(np.exp(M - mx[:, None]), axis=1))
        f = fr * (f + eps * log_mu - eps * lse)
        M = (f[:, None] + g[None, :] - C) / eps
        mx = np.max(M, axis=0)
        lse = mx + np.log(np.sum(np.exp(M - mx[None, :]), axis=0))
        g = fc * (g + eps * log_nu - eps * lse)
    return f, g


def _sinkhorn_log_sweeps_nb(C, log_mu, log_nu, eps, fr, fc, n_iter, f, g):
    n, m = C.shape
    f = f.copy()
    g = g.copy()
    buf = np.empty(max(n, m), dtype=np.float64)
    for _ in range(n_iter):
        for i in range(n):
            mx = -np.inf
            for j in range(m):
                v = (f[i] + g[j] - C[i, j]) / eps
                buf[j] = v
                if v > mx:
                    mx = v
            s = 0.0
            for j in range(m):
                s += np.exp(buf[j] - mx)
            f[i] = fr * (f[i] + eps * log_mu[i] - eps * (mx + np.log(s)))
        for j in range(m):
            mx = -np.inf
            for i in range(n):
                v = (f[i] + g[j] - C[i, j]) / eps
                buf[i] = v
                if v > mx:
                    mx = v
            s = 0.0
            for i in range(n):
                s += np.exp(buf[i] - mx)
            g[j] = fc * (g[j] + eps * log_nu[j] - eps * (mx + np.log(s)))
    return f, g


# ---------------------------------------------------------------------------
# one Euler-Maruyama step of the regulatory-network dynamics with Hill
# kinetics.  Edges are (target, regulator) index pairs; noise is pre-drawn
# standard normal so both lanes consume the same stream.


def _grn_step_np(x, basal, decay, edge_tgt, edge_reg, edge_w, edge_k, edge_n, dt, noise_scale, noise):
    dx = basal - decay[None, :] * x
    if edge_tgt.size:
        xr = np.maximum(x[:, edge_reg], 0.0)
        xn = xr ** edge_n[None, :]
        hill = xn / (edge_k[None, :] ** edge_n[None, :] + xn)
        np.add.at(dx.T, edge_tgt, (edge_w[None, :] * hill).T)
    out = x + dt * dx
    if noise_scale > 0.0:
        out += noise_scale * np.sqrt(np.maximum(x, 0.0)) * np.sqrt(dt) * noise
    return np.maximum(out, 0.0)


def _grn_step_nb(x, basal, decay, edge_tgt, edge_reg, edge_w, edge_k, edge_n, dt, noise_scale, noise):
    n_cells, n_genes = x.shape
    dx = np.empty_like(x)
    out = np.empty_like(x)
    sq_dt = np.sqrt(dt)
    for c in range(n_cells):
        for gi in range(n_genes):
            dx[c, gi] = basal[c, gi] - decay[gi] * x[c, gi]
        for e in range(edge_tgt.size):
            xr = x[c, edge_reg[e]]
            if xr < 0.0:
                xr = 0.0
            xn = xr ** edge_n[e]
            hill = xn / (edge_k[e] ** edge_n[e] + xn)
            dx[c, edge_tgt[e]] += edge_w[e] * hill
        for gi in range(n_genes):
            v = x[c, gi] + dt * dx[c, gi]
            if noise_scale > 0.0:
                xpos = x[c, gi] if x[c, gi] > 0.0 else 0.0
                v += noise_scale * np.sqrt(xpos) * sq_dt * noise[c, gi]
            out[c, gi] = v if v > 0.0 else 0.0
    return out


PY_FUNCS = {
    "pairwise_sq_dists": _pairwise_sq_dists_np,
    "density_hinge": _density_hinge_np,
    "sinkhorn_log_sweeps": _sinkhorn_log_sweeps_np,
    "grn_step": _grn_step_np,
}

if USE_NUMBA:
    pairwise_sq_dists = njit(cache=True)(_pairwise_sq_dists_nb)
    density_hinge = njit(cache=True)(_density_hinge_nb)
    sinkhorn_log_sweeps = njit(cache=True)(_sinkhorn_log_sweeps_nb)
    grn_step = njit(cache=True)(_grn_step_nb)
    NB_FUNCS = {
        "pairwise_sq_dists": pairwise_sq_dists,
        "density_hinge": density_hinge,
        "sinkhorn_log_sweeps": sinkhorn_log_sweeps,
        "grn_step": grn_step,
    }
else:
    pairwise_sq_dists = _pairwise_sq_dists_np
    density_hinge = _density_hinge_np
    sinkhorn_log_sweeps = _sinkhorn_log_sweeps_np
    grn_step = _grn_step_np
    NB_FUNCS = {}
