"""Static optimal-transport solvers and the Wasserstein training loss.

Exact plans come from the HiGHS LP solver on the flattened transport
polytope (batch sizes here are small enough that exactness is cheap);
entropic and KL-unbalanced problems use Sinkhorn scaling with a log-domain
stabilized path for small regularization.
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from . import _kernels
from .numerics import as_matrix, pairwise_sq_dists

# exact solver above this size gets replaced by entropic smoothing in w2_loss
EXACT_SIZE_LIMIT = 512


@dataclass
class DiscreteMeasure:
    """Weighted point cloud; weights are nonnegative masses."""

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.support = as_matrix(self.support, "support")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or self.weights.shape[0] != self.support.shape[0]:
            raise ValueError("weights must be one per support point")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite and nonnegative")

    @property
    def n(self):
        return self.support.shape[0]


def uniform_measure(points):
    points = as_matrix(points, "points")
    n = points.shape[0]
    if n == 0:
        raise ValueError("empty measure")
    return DiscreteMeasure(points, np.full(n, 1.0 / n))


@dataclass
class TransportPlan:
    plan: np.ndarray
    cost: float
    dual_f: np.ndarray
    dual_g: np.ndarray
    marginal_residuals: tuple
    converged: bool = True
    n_iter: int = 0


def cost_matrix(X, Y, p=2):
    """Euclidean ground cost to the power p (p=2 is squared Euclidean)."""
    D2 = pairwise_sq_dists(X, Y)
    if p == 2:
        return D2
    if p == 1:
        return np.sqrt(D2)
    raise ValueError("p must be 1 or 2")


def _residuals(plan, a, b):
    return (float(np.abs(plan.sum(axis=1) - a).sum()),
            float(np.abs(plan.sum(axis=0) - b).sum()))


def emd(mu, nu, p=2):
    """Exact optimal transport between balanced measures.

    The minimizer of sum pi_ij d(x_i, y_j)^p over the transport polytope,
    solved as an LP; ``cost ** (1/p)`` is the Wasserstein-p distance.
    Duals are the Kantorovich potentials from the LP equality multipliers.
    """
    if mu.n == 0 or nu.n == 0:
        raise ValueError("empty measure")
    a, b = mu.weights, nu.weights
    sa, sb = a.sum(), b.sum()
    if abs(sa - sb) > 1e-9 * max(sa, sb, 1.0):
        raise ValueError(f"unbalanced masses: {sa} vs {sb}")
    keep_i = np.flatnonzero(a > 0)
    keep_j = np.flatnonzero(b > 0)
    aa = a[keep_i]
    bb = b[keep_j] * (aa.sum() / b[keep_j].sum())
    C = cost_matrix(mu.support[keep_i], nu.support[keep_j], p)
    n, m = C.shape

    rows_i = np.repeat(np.arange(n), m)
    cols = np.arange(n * m)
    rows_j = n + np.tile(np.arange(m), n)
    A = sparse.coo_matrix(
        (np.ones(2 * n * m), (np.concatenate([rows_i, rows_j]), np.concatenate([cols, cols]))),
        shape=(n + m, n * m),
    ).tocsr()
    res = linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([aa, bb]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"exact transport LP failed: {res.message}")

    plan = np.zeros((mu.n, nu.n))
    plan[np.ix_(keep_i, keep_j)] = np.maximum(res.x.reshape(n, m), 0.0)
    duals = np.asarray(res.eqlin.marginals, dtype=np.float64)
    dual_f = np.zeros(mu.n)
    dual_g = np.zeros(nu.n)
    dual_f[keep_i] = duals[:n]
    dual_g[keep_j] = duals[n:]
    return TransportPlan(plan, float(res.fun), dual_f, dual_g, _residuals(plan, a, b))


def _plan_from_duals(C, f, g, eps):
    return np.exp((f[:, None] + g[None, :] - C) / eps)


def sinkhorn(mu, nu, eps, max_iter=2000, tol=1e-9):
    """Entropic OT plan diag(u) K diag(v) with K = exp(-C/eps).

    Iterates until both L1 marginal residuals drop below ``tol``; switches
    to log-domain scaling when eps is small relative to the cost scale.
    Duals are eps*log(u), eps*log(v).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if mu.n == 0 or nu.n == 0:
        raise ValueError("empty measure")
    a, b = mu.weights.copy(), nu.weights.copy()
    sa, sb = a.sum(), b.sum()
    if abs(sa - sb) > 1e-9 * max(sa, sb, 1.0):
        raise ValueError(f"unbalanced masses: {sa} vs {sb}")
    C = cost_matrix(mu.support, nu.support, 2)
    keep_i = np.flatnonzero(a > 0)
    keep_j = np.flatnonzero(b > 0)
    aa, bb = a[keep_i], b[keep_j]
    Cr = np.ascontiguousarray(C[np.ix_(keep_i, keep_j)])

    use_log = eps < 1e-2 * max(Cr.max(), 1e-300)
    n_iter = 0
    if use_log:
        f = np.zeros(len(aa))
        g = np.zeros(len(bb))
        log_a, log_b = np.log(aa), np.log(bb)
        block = 10
        plan_r = None
        while n_iter < max_iter:
            sweeps = min(block, max_iter - n_iter)
            f, g = _kernels.sinkhorn_log_sweeps(Cr, log_a, log_b, eps, 1.0, 1.0, sweeps, f, g)
            n_iter += sweeps
            plan_r = _plan_from_duals(Cr, f, g, eps)
            r1 = np.abs(plan_r.sum(axis=1) - aa).sum()
            r2 = np.abs(plan_r.sum(axis=0) - bb).sum()
            if max(r1, r2) < tol:
                break
        dual_f_r, dual_g_r = f, g
    else:
        K = np.exp(-Cr / eps)
        u = np.ones(len(aa))
        v = np.ones(len(bb))
        while n_iter < max_iter:
            u = aa / (K @ v)
            v = bb / (K.T @ u)
            n_iter += 1
            if n_iter % 10 == 0 or n_iter == max_iter:
                plan_r = (u[:, None] * K) * v[None, :]
                r1 = np.abs(plan_r.sum(axis=1) - aa).sum()
                r2 = np.abs(plan_r.sum(axis=0) - bb).sum()
                if max(r1, r2) < tol:
                    break
        plan_r = (u[:, None] * K) * v[None, :]
        dual_f_r, dual_g_r = eps * np.log(u), eps * np.log(v)

    plan = np.zeros((mu.n, nu.n))
    plan[np.ix_(keep_i, keep_j)] = plan_r
    dual_f = np.zeros(mu.n)
    dual_g = np.zeros(nu.n)
    dual_f[keep_i] = dual_f_r
    dual_g[keep_j] = dual_g_r
    resid = _residuals(plan, a, b)
    return TransportPlan(plan, float((plan * C).sum()), dual_f, dual_g,
                         resid, converged=max(resid) < tol, n_iter=n_iter)


def sinkhorn_unbalanced(mu, nu, eps, lam1, lam2, max_iter=2000, tol=1e-9):
    """KL-relaxed entropic transport allowing mass creation and destruction.

    Minimizes sum pi C + lam1 KL(pi_1 | mu) + lam2 KL(pi_2 | nu) + eps H(pi)
    by the scaling iteration with dual damping lam_i / (lam_i + eps).
    Convergence is measured by the sup-norm change of the duals.
    """
    if eps <= 0 or lam1 <= 0 or lam2 <= 0:
        raise ValueError("eps, lam1, lam2 must be positive")
    if mu.n == 0 or nu.n == 0:
        raise ValueError("empty measure")
    a, b = mu.weights, nu.weights
    keep_i = np.flatnonzero(a > 0)
    keep_j = np.flatnonzero(b > 0)
    aa, bb = a[keep_i], b[keep_j]
    C = cost_matrix(mu.support, nu.support, 2)
    Cr = np.ascontiguousarray(C[np.ix_(keep_i, keep_j)])
    fr = lam1 / (lam1 + eps)
    fc = lam2 / (lam2 + eps)
    log_a, log_b = np.log(aa), np.log(bb)

    f = np.zeros(len(aa))
    g = np.zeros(len(bb))
    n_iter = 0
    converged = False
    block = 5
    while n_iter < max_iter:
        sweeps = min(block, max_iter - n_iter)
        f_new, g_new = _kernels.sinkhorn_log_sweeps(Cr, log_a, log_b, eps, fr, fc, sweeps, f, g)
        n_iter += sweeps
        delta = max(np.max(np.abs(f_new - f)), np.max(np.abs(g_new - g)))
        f, g = f_new, g_new
        if delta < tol:
            converged = True
            break

    plan_r = _plan_from_duals(Cr, f, g, eps)
    plan = np.zeros((mu.n, nu.n))
    plan[np.ix_(keep_i, keep_j)] = plan_r
    dual_f = np.zeros(mu.n)
    dual_g = np.zeros(nu.n)
    dual_f[keep_i] = f
    dual_g[keep_j] = g
    return TransportPlan(plan, float((plan * C).sum()), dual_f, dual_g,
                         _residuals(plan, a, b), converged=converged, n_iter=n_iter)


def w2_loss(pred, target):
    """Squared W2 between a weighted prediction and a uniform target.

    Returns (cost, grad_points, grad_weights).  Point gradients hold the
    plan fixed (envelope rule): 2 sum_j pi_ij (x_i - y_j).  The weight
    gradient is the zero-centered source dual potential.
    """
    if pred.n == 0 or target.n == 0:
        raise ValueError("empty measure")
    w = pred.weights / pred.weights.sum()
    mu = DiscreteMeasure(pred.support, w)
    nu = DiscreteMeasure(target.support, target.weights / target.weights.sum())
    if max(mu.n, nu.n) <= EXACT_SIZE_LIMIT:
        plan = emd(mu, nu, p=2)
    else:
        C = cost_matrix(mu.support, nu.support, 2)
        plan = sinkhorn(mu, nu, eps=0.01 * float(C.mean()))
    pi = plan.plan
    grad_points = 2.0 * (pi.sum(axis=1)[:, None] * mu.support - pi @ nu.support)
    grad_weights = plan.dual_f - plan.dual_f.mean()
    return plan.cost, grad_points, grad_weights
