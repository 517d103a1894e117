"""Objective assembly and the local/global training loops.

Per iteration, mini-batches are drawn per timepoint (without replacement
within an epoch) and trajectories are integrated either segment-by-segment
from observed data (local) or chained forward from the first timepoint
(global).  The loss is lambda_m * transport + lambda_e * kinetic energy +
lambda_d * density hinge; gradients flow through the unrolled solver and,
when enabled, the growth head that weights predicted samples.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .dynamics import (DynamicsModel, backprop_integrate, eval_growth,
                       integrate, make_dynamics_model)
from .numerics import (NumericError, adam_init, adam_step, as_matrix,
                       make_rng, mlp_backward, mlp_forward_cached,
                       pairwise_sq_dists)
from .transport import (DiscreteMeasure, sinkhorn_unbalanced,
                        uniform_measure, w2_loss)


@dataclass
class TrainConfig:
    lambda_m: float = 1.0
    lambda_e: float = 0.01
    lambda_d: float = 0.1
    k_density: int = 5
    h_margin: float = None  # default: 0.1 * median pairwise latent distance
    batch_size: int = 64
    iterations: int = 500
    lr: float = 0.01
    seed: int = 0
    mode: str = "local"            # or "global"
    solver: str = "ode"            # or "sde"
    growth_enabled: bool = False
    uot_eps: float = 0.05
    uot_lam1: float = 0.5
    uot_lam2: float = 50.0
    n_steps: int = 10              # solver steps per unit time
    momentum_beta: float = 0.0
    momentum_gamma: float = 0.9
    hidden: tuple = (64, 64)
    ode_method: str = "euler"
    sigma_init: float = 0.1
    growth_lr_scale: float = 0.1
    pretrain_epochs: int = 300

    def __post_init__(self):
        if self.lambda_m <= 0 and self.lambda_e <= 0 and self.lambda_d <= 0:
            raise ValueError("at least one loss weight must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.mode not in ("local", "global"):
            raise ValueError("mode must be 'local' or 'global'")
        if self.solver not in ("ode", "sde"):
            raise ValueError("solver must be 'ode' or 'sde'")


def energy_loss(batch):
    """Left-Riemann kinetic energy: mean over cells of sum_k h * ||f_k||^2."""
    h = float(batch.times[1] - batch.times[0])
    return float(np.mean(np.sum(batch.drift_evals ** 2, axis=(1, 2))) * h)


def _energy_grad(batch):
    h = float(batch.times[1] - batch.times[0])
    n = batch.paths.shape[0]
    return (2.0 * h / n) * batch.drift_evals


def density_loss(pred, data, k, h):
    """Hinge penalty on the k smallest distances from each prediction to data."""
    pred = as_matrix(pred, "pred")
    data = as_matrix(data, "data")
    if data.shape[0] == 0:
        raise ValueError("empty data")
    if k > data.shape[0]:
        raise ValueError(f"k={k} exceeds data size {data.shape[0]}")
    per_point = _kernels.density_hinge(np.ascontiguousarray(pred),
                                       np.ascontiguousarray(data), k, float(h))
    return float(np.mean(per_point))


def _density_grad(pred, data, k, h):
    D = np.sqrt(pairwise_sq_dists(pred, data))
    idx = np.argpartition(D, k - 1, axis=1)[:, :k]
    grad = np.zeros_like(pred)
    n = pred.shape[0]
    for i in range(n):
        for j in idx[i]:
            dist = D[i, j]
            if dist > h:
                grad[i] += (pred[i] - data[j]) / max(dist, 1e-12)
    return grad / n


def marginal_loss(pred_points, growth_masses, target_points):
    """Transport loss of the mass-weighted prediction against a uniform target.

    Masses are normalized internally, so the loss is invariant to their
    overall scale.  Returns (cost, grad_points, grad_masses) where the mass
    gradient is routed through the normalization.
    """
    masses = np.asarray(growth_masses, dtype=np.float64)
    if np.any(masses <= 0):
        raise ValueError("growth masses must be positive")
    S = masses.sum()
    w = masses / S
    cost, grad_points, grad_w = w2_loss(
        DiscreteMeasure(as_matrix(pred_points, "pred"), w),
        uniform_measure(target_points))
    grad_masses = (grad_w - float(w @ grad_w)) / S
    return cost, grad_points, grad_masses


def uot_growth_targets(Z_list, uot_eps=0.05, uot_lam1=0.5, uot_lam2=50.0,
                       max_iter=2000, tol=1e-8):
    """Per-cell relative-mass targets from unbalanced transport marginals.

    For each adjacent snapshot pair the source marginal of the UOT plan is
    rescaled by the source size, so a cell that neither grows nor dies gets
    a target of 1.
    """
    if len(Z_list) < 2:
        raise ValueError("need at least 2 timepoints")
    targets = []
    for Zs, Zt in zip(Z_list[:-1], Z_list[1:]):
        mu = uniform_measure(Zs)
        nu = uniform_measure(Zt)
        plan = sinkhorn_unbalanced(mu, nu, uot_eps, uot_lam1, uot_lam2,
                                   max_iter=max_iter, tol=tol)
        if not plan.converged:
            raise NumericError("unbalanced transport did not converge in warm-start")
        targets.append(mu.n * plan.plan.sum(axis=1))
    return targets


def pretrain_growth(growth, Z_list, times=None, uot_eps=0.05, uot_lam1=0.5,
                    uot_lam2=50.0, epochs=300, lr=0.01, seed=0):
    """Warm-start the growth head by regressing it onto UOT mass targets.

    Returns (growth, targets, mse_history); the final MSE never exceeds the
    initial one by construction of the descent loop assertion in tests.
    """
    targets = uot_growth_targets(Z_list, uot_eps, uot_lam1, uot_lam2)
    if times is None:
        times = np.arange(len(Z_list), dtype=np.float64)
    inputs = np.concatenate([
        np.concatenate([Z, np.full((Z.shape[0], 1), float(t))], axis=1)
        for Z, t in zip(Z_list[:-1], times[:-1])
    ])
    y = np.concatenate(targets)
    params = growth.params()
    state = adam_init(params)
    history = []
    for _ in range(epochs):
        out, cache = mlp_forward_cached(growth, inputs)
        resid = out[:, 0] - y
        mse = float(np.mean(resid ** 2))
        history.append(mse)
        grads, _ = mlp_backward(growth, cache, (2.0 / y.size) * resid[:, None])
        adam_step(params, grads, state, lr)
    out, _ = mlp_forward_cached(growth, inputs)
    history.append(float(np.mean((out[:, 0] - y) ** 2)))
    return growth, targets, history


class _BatchQueue:
    """Per-timepoint shuffled index queues; draws are without replacement per epoch."""

    def __init__(self, sizes, batch, rng):
        self.sizes = sizes
        self.batch = batch
        self.rng = rng
        self.queues = [np.array([], dtype=np.int64) for _ in sizes]

    def draw(self):
        out = []
        for i, n in enumerate(self.sizes):
            if self.queues[i].size < self.batch:
                self.queues[i] = self.rng.permutation(n)
            out.append(self.queues[i][:self.batch])
            self.queues[i] = self.queues[i][self.batch:]
        return out


def _median_pairwise(Z):
    D = np.sqrt(pairwise_sq_dists(Z))
    iu = np.triu_indices(Z.shape[0], k=1)
    return float(np.median(D[iu]))


def train(Z_list, cfg, times=None, model=None):
    """Fit the dynamics to a sequence of latent snapshots.

    Returns (model, history) where history is the per-iteration total loss.
    In global mode predictions are chained forward from the first snapshot,
    so gradients are propagated back through every earlier segment.
    """
    if len(Z_list) < 2:
        raise ValueError("need at least 2 timepoints")
    Z_list = [as_matrix(Z, f"Z[{i}]") for i, Z in enumerate(Z_list)]
    d = Z_list[0].shape[1]
    if times is None:
        times = np.arange(len(Z_list), dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    T = len(Z_list)

    if model is None:
        model = make_dynamics_model(d, hidden=cfg.hidden, seed=cfg.seed,
                                    momentum_beta=cfg.momentum_beta,
                                    momentum_gamma=cfg.momentum_gamma,
                                    mode=cfg.solver, sigma_init=cfg.sigma_init)
    if cfg.growth_enabled:
        pretrain_growth(model.growth, Z_list, times, cfg.uot_eps, cfg.uot_lam1,
                        cfg.uot_lam2, epochs=cfg.pretrain_epochs,
                        lr=cfg.lr, seed=cfg.seed)

    h_margin = cfg.h_margin
    if h_margin is None:
        pooled = np.concatenate(Z_list, axis=0)
        cap = min(pooled.shape[0], 1024)
        h_margin = 0.1 * _median_pairwise(pooled[:cap])

    params, spans = model.param_groups()
    lr_scales = np.ones(len(params))
    lr_scales[spans["growth"][0]:spans["growth"][1]] = cfg.growth_lr_scale
    state = adam_init(params)

    B = min(cfg.batch_size, min(Z.shape[0] for Z in Z_list))
    queue = _BatchQueue([Z.shape[0] for Z in Z_list], B, make_rng(cfg.seed, 31))
    history = []

    for it in range(cfg.iterations):
        batches = [Z_list[t][idx] for t, idx in enumerate(queue.draw())]
        segments = []
        total = 0.0
        start = batches[0]
        for s in range(T - 1):
            t0, t1 = times[s], times[s + 1]
            n_steps = max(1, int(round(cfg.n_steps * (t1 - t0))))
            z_from = batches[s] if cfg.mode == "local" else start
            rng = make_rng(cfg.seed, 101, it, s) if cfg.solver == "sde" else None
            traj = integrate(model, z_from, t0, t1, n_steps, rng=rng,
                             method=cfg.ode_method if cfg.solver == "ode" else "euler")
            pred = traj.endpoints
            d_end = np.zeros_like(pred)
            d_fe = None
            g_grads = None

            if cfg.growth_enabled:
                zt = np.concatenate([pred, np.full((pred.shape[0], 1), t1)], axis=1)
                gout, gcache = mlp_forward_cached(model.growth, zt)
                masses = gout[:, 0]
            else:
                masses = np.ones(pred.shape[0])

            if cfg.lambda_m > 0:
                lm, gp, gm = marginal_loss(pred, masses, batches[s + 1])
                total += cfg.lambda_m * lm
                d_end += cfg.lambda_m * gp
                if cfg.growth_enabled:
                    g_grads, gin = mlp_backward(model.growth, gcache,
                                                cfg.lambda_m * gm[:, None])
                    d_end += gin[:, :-1]
            if cfg.lambda_e > 0:
                total += cfg.lambda_e * energy_loss(traj)
                d_fe = cfg.lambda_e * _energy_grad(traj)
            if cfg.lambda_d > 0:
                total += cfg.lambda_d * density_loss(pred, Z_list[s + 1],
                                                     cfg.k_density, h_margin)
                d_end += cfg.lambda_d * _density_grad(pred, Z_list[s + 1],
                                                      cfg.k_density, h_margin)
            segments.append((traj, d_end, d_fe, g_grads))
            if cfg.mode == "global":
                start = pred
        if not np.isfinite(total):
            raise NumericError(f"non-finite loss at iteration {it}")

        grads = [np.zeros_like(p) for p in params]
        carry = None
        for s in range(T - 2, -1, -1):
            traj, d_end, d_fe, g_grads = segments[s]
            d_paths = np.zeros_like(traj.paths)
            d_paths[:, -1] = d_end if carry is None else d_end + carry
            head_grads, d_z0 = backprop_integrate(model, traj, d_paths, d_fe)
            for i, g in enumerate(head_grads["drift"]):
                grads[spans["drift"][0] + i] += g
            for i, g in enumerate(head_grads["diffusion"]):
                grads[spans["diffusion"][0] + i] += g
            if g_grads is not None:
                for i, g in enumerate(g_grads):
                    grads[spans["growth"][0] + i] += g
            carry = d_z0 if cfg.mode == "global" else None

        adam_step(params, grads, state, cfg.lr, lr_scales=lr_scales)
        history.append(total)
    return model, history
