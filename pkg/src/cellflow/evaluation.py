"""Evaluation protocols: branch summaries, reconstruction error, metrics, LOO.

Trajectories are clustered by endpoint with k-means++ (20 restarts, best
inertia) and summarized by per-cluster mean paths; reconstruction error is
the minimum distance from test points to any mean-path vertex.  The
distribution metrics are exact W1 on (sub)samples, a biased Gaussian-kernel
MMD with median-heuristic bandwidth, and the mean discrepancy.
"""

from dataclasses import dataclass, replace

import numpy as np

from .dynamics import integrate
from .numerics import as_matrix, make_rng, pairwise_sq_dists
from .training import train
from .transport import DiscreteMeasure, emd, uniform_measure


def kmeans(X, K, seed=0, n_init=20, max_iter=100):
    """Plain Lloyd iterations from k-means++ seeds; best inertia wins.

    Empty clusters are re-seeded on the point farthest from its center, so
    every cluster ends nonempty.  Returns (centers, assignment, inertia).
    """
    X = as_matrix(X)
    n = X.shape[0]
    if not 1 <= K <= n:
        raise ValueError(f"K={K} out of range for {n} points")
    best = None
    for restart in range(n_init):
        rng = make_rng(seed, 71, restart)
        centers = np.empty((K, X.shape[1]))
        centers[0] = X[rng.integers(n)]
        d2 = pairwise_sq_dists(X, centers[:1])[:, 0]
        for k in range(1, K):
            total = d2.sum()
            if total <= 0:
                centers[k] = X[rng.integers(n)]
            else:
                centers[k] = X[rng.choice(n, p=d2 / total)]
            d2 = np.minimum(d2, pairwise_sq_dists(X, centers[k:k + 1])[:, 0])
        assign = np.zeros(n, dtype=np.int64)
        for _ in range(max_iter):
            D = pairwise_sq_dists(X, centers)
            new_assign = np.argmin(D, axis=1)
            for k in range(K):
                if not np.any(new_assign == k):
                    far = np.argmax(np.min(D, axis=1))
                    new_assign[far] = k
                    centers[k] = X[far]
            moved = np.any(new_assign != assign)
            assign = new_assign
            for k in range(K):
                centers[k] = X[assign == k].mean(axis=0)
            if not moved:
                break
        inertia = float(np.sum((X - centers[assign]) ** 2))
        if best is None or inertia < best[2]:
            best = (centers.copy(), assign.copy(), inertia)
    return best


@dataclass
class BranchSummary:
    K: int
    mean_paths: np.ndarray   # K x (steps+1) x d
    assignment: np.ndarray   # per-trajectory branch index


def branch_means(batch, K, seed=0):
    """Cluster trajectories by endpoint and average each cluster pointwise."""
    n = batch.paths.shape[0]
    if K < 1 or K > n:
        raise ValueError(f"K={K} out of range for {n} trajectories")
    _, assign, _ = kmeans(batch.paths[:, -1, :], K, seed=seed)
    mean_paths = np.stack([batch.paths[assign == k].mean(axis=0) for k in range(K)])
    return BranchSummary(K=K, mean_paths=mean_paths, assignment=assign)


def trajectory_error(test_points, summary):
    """Mean and std of min distance to any mean-path vertex (vertex-based)."""
    pts = as_matrix(test_points, "test_points")
    if pts.shape[0] == 0:
        raise ValueError("empty test set")
    verts = summary.mean_paths.reshape(-1, summary.mean_paths.shape[-1])
    d = np.sqrt(pairwise_sq_dists(pts, verts)).min(axis=1)
    return float(d.mean()), float(d.std())


def _canonical_pair(X, Y):
    kx = (X.shape, X.tobytes())
    ky = (Y.shape, Y.tobytes())
    return (X, Y, False) if kx <= ky else (Y, X, True)


def w1(X, Y, cap=1000, seed=0, x_weights=None):
    """Exact Wasserstein-1 with Euclidean ground metric on capped subsamples.

    Subsampling is keyed by (seed, side size); the two inputs are ordered
    canonically before solving so w1(X, Y) == w1(Y, X) bitwise.  Optional
    ``x_weights`` turn X into a weighted measure (no subsampling then).
    """
    X = np.ascontiguousarray(as_matrix(X))
    Y = np.ascontiguousarray(as_matrix(Y, "Y"))
    if x_weights is not None:
        mu = DiscreteMeasure(X, np.asarray(x_weights, float) / np.sum(x_weights))
        return float(emd(mu, uniform_measure(Y), p=1).cost)

    def sub(A):
        n = A.shape[0]
        if n <= cap:
            return A
        return A[np.sort(make_rng(seed, 83, n).permutation(n)[:cap])]

    A, B, _ = _canonical_pair(sub(X), sub(Y))
    return float(emd(uniform_measure(A), uniform_measure(B), p=1).cost)


def _median_bandwidth(X, Y):
    pooled = np.concatenate([X, Y])
    D = np.sqrt(pairwise_sq_dists(pooled))
    iu = np.triu_indices(pooled.shape[0], k=1)
    med = float(np.median(D[iu])) if iu[0].size else 0.0
    return med if med > 0 else 1.0


def mmd_gaussian(X, Y):
    """Biased V-statistic MMD with exp(-d^2 / (2 sigma^2)), sigma = median distance."""
    X = as_matrix(X)
    Y = as_matrix(Y, "Y")
    sigma = _median_bandwidth(X, Y)
    s2 = 2.0 * sigma * sigma
    kxx = np.exp(-pairwise_sq_dists(X, X) / s2).mean()
    kyy = np.exp(-pairwise_sq_dists(Y, Y) / s2).mean()
    kxy = np.exp(-pairwise_sq_dists(X, Y) / s2).mean()
    return float(max(kxx + kyy - 2.0 * kxy, 0.0))


def mmd_mean(X, Y):
    """L2 discrepancy between sample means."""
    return float(np.linalg.norm(as_matrix(X).mean(axis=0) - as_matrix(Y, "Y").mean(axis=0)))


METRICS = {"w1": w1, "mmd_gaussian": lambda X, Y, **kw: mmd_gaussian(X, Y),
           "mmd_mean": lambda X, Y, **kw: mmd_mean(X, Y)}


def leave_one_out(Z_list, cfg, times=None, w1_cap=1000, space_tag="latent"):
    """Hold out each interior snapshot, train on the rest, predict it.

    The model is trained on the remaining timepoints, integrated from the
    held-out point's predecessor over the actual gap, and scored against
    the held-out snapshot.  Returns rows of (t, metric, value, space).
    """
    T = len(Z_list)
    if T < 3:
        raise ValueError("leave-one-out needs at least 3 timepoints")
    if times is None:
        times = np.arange(T, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    rows = []
    for t in range(1, T - 1):
        keep = [i for i in range(T) if i != t]
        model, _ = train([Z_list[i] for i in keep], cfg,
                         times=times[keep])
        n_steps = max(1, int(round(cfg.n_steps * (times[t] - times[t - 1]))))
        rng = make_rng(cfg.seed, 89, t) if cfg.solver == "sde" else None
        traj = integrate(model, Z_list[t - 1], times[t - 1], times[t],
                         n_steps, rng=rng,
                         method=cfg.ode_method if cfg.solver == "ode" else "euler")
        pred = traj.endpoints
        rows.append((t, "w1", w1(pred, Z_list[t], cap=w1_cap, seed=cfg.seed), space_tag))
        rows.append((t, "mmd_gaussian", mmd_gaussian(pred, Z_list[t]), space_tag))
        rows.append((t, "mmd_mean", mmd_mean(pred, Z_list[t]), space_tag))
    return rows
