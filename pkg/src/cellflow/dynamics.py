"""Drift/diffusion/growth networks and fixed-step ODE/SDE integration.

Trajectories are rolled out with Euler (or RK4) steps for the ODE mode and
Euler-Maruyama for the SDE mode.  A momentum refinement blends the raw
drift with an exponential moving average of past drift evaluations.
``backprop_integrate`` runs exact reverse accumulation through the unrolled
solver, reusing the recorded Gaussian draws in SDE mode, so gradients are
those of the discrete rollout.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import (NumericError, MlpModel, make_rng, mlp_backward,
                       mlp_forward, mlp_forward_cached, mlp_init,
                       softplus_inverse)


@dataclass
class DynamicsModel:
    """Trainable dynamics: drift f, diffusion sigma (positive), growth h (positive).

    ``mode`` decides stochasticity: in "ode" mode the diffusion output is
    gated to zero regardless of its weights, so paths are deterministic.
    """

    drift: MlpModel
    diffusion: MlpModel
    growth: MlpModel
    momentum_beta: float = 0.0
    momentum_gamma: float = 0.9
    mode: str = "ode"

    def __post_init__(self):
        if self.mode not in ("ode", "sde"):
            raise ValueError("mode must be 'ode' or 'sde'")
        if not 0.0 <= self.momentum_beta <= 1.0:
            raise ValueError("momentum_beta must be in [0, 1]")
        if not 0.0 <= self.momentum_gamma < 1.0:
            raise ValueError("momentum_gamma must be in [0, 1)")

    @property
    def dim(self):
        return self.drift.layer_sizes[-1]

    def param_groups(self):
        """Flat parameter list plus the index ranges of each head."""
        params = self.drift.params() + self.diffusion.params() + self.growth.params()
        n_dr = len(self.drift.params())
        n_di = len(self.diffusion.params())
        spans = {"drift": (0, n_dr), "diffusion": (n_dr, n_dr + n_di),
                 "growth": (n_dr + n_di, len(params))}
        return params, spans


def make_dynamics_model(dim, hidden=(64, 64), seed=0, momentum_beta=0.0,
                        momentum_gamma=0.9, mode="ode", sigma_init=0.1,
                        growth_bias=1.0):
    """Fresh model; positive heads get biases hitting the requested initial values."""
    rng = make_rng(seed, 23)
    acts = ("tanh",) * len(hidden)
    drift = mlp_init((dim + 1, *hidden, dim), acts + ("identity",), rng)
    diffusion = mlp_init((dim + 1, *hidden, dim), acts + ("softplus",), rng)
    diffusion.biases[-1][:] = softplus_inverse(sigma_init)
    growth = mlp_init((dim + 1, *hidden, 1), acts + ("softplus",), rng)
    growth.biases[-1][:] = softplus_inverse(growth_bias)
    return DynamicsModel(drift=drift, diffusion=diffusion, growth=growth,
                         momentum_beta=momentum_beta, momentum_gamma=momentum_gamma,
                         mode=mode)


def _with_time(z, t):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    Z = z[None, :] if single else z
    col = np.full((Z.shape[0], 1), float(t))
    return np.concatenate([Z, col], axis=1), single


def eval_drift(m, z, t):
    zt, single = _with_time(z, t)
    out = mlp_forward(m.drift, zt)
    return out[0] if single else out


def eval_diffusion(m, z, t):
    zt, single = _with_time(z, t)
    out = mlp_forward(m.diffusion, zt)
    return out[0] if single else out


def eval_growth(m, z, t):
    zt, single = _with_time(z, t)
    out = mlp_forward(m.growth, zt)[..., 0]
    return float(out[0]) if single else out


@dataclass
class _Tape:
    mode: str
    method: str
    t0: float
    h: float
    n_steps: int
    xi: np.ndarray  # (n, steps, d) standard-normal draws, SDE only


@dataclass
class TrajectoryBatch:
    """Latent paths on a uniform step grid with per-cell mass weights."""

    paths: np.ndarray        # (cells, steps+1, d)
    times: np.ndarray        # (steps+1,)
    masses: np.ndarray       # (cells,)
    drift_evals: np.ndarray  # (cells, steps, d) raw drift at step starts
    tape: _Tape = field(default=None, repr=False)

    @property
    def endpoints(self):
        return self.paths[:, -1, :]


def integrate(m, z0, t0, t1, n_steps, rng=None, method="euler"):
    """Roll the dynamics forward from z0 over [t0, t1] in n_steps steps.

    The momentum term v is an EMA of raw drift evaluations (v_0 = f_0) and
    the integrated field is (1-beta) f + beta v.  RK4 treats v as frozen
    within each step and is only valid in ODE mode.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if method not in ("euler", "rk4"):
        raise ValueError("method must be 'euler' or 'rk4'")
    if m.mode == "sde":
        if method != "euler":
            raise ValueError("SDE integration is Euler-Maruyama only")
        if rng is None:
            raise ValueError("sde mode needs an rng")
    z = np.asarray(z0, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != m.dim:
        raise ValueError(f"z0 must be (cells, {m.dim})")
    n, d = z.shape
    h = (float(t1) - float(t0)) / n_steps
    beta, gamma = m.momentum_beta, m.momentum_gamma

    paths = np.empty((n, n_steps + 1, d))
    drift_evals = np.empty((n, n_steps, d))
    xi = np.empty((n, n_steps, d)) if m.mode == "sde" else None
    paths[:, 0] = z
    v = None
    for k in range(n_steps):
        tk = t0 + k * h
        f_k = eval_drift(m, z, tk)
        drift_evals[:, k] = f_k
        v = f_k if k == 0 else gamma * v + (1.0 - gamma) * f_k
        if method == "rk4":
            vk = v
            k1 = (1.0 - beta) * f_k + beta * vk
            k2 = (1.0 - beta) * eval_drift(m, z + 0.5 * h * k1, tk + 0.5 * h) + beta * vk
            k3 = (1.0 - beta) * eval_drift(m, z + 0.5 * h * k2, tk + 0.5 * h) + beta * vk
            k4 = (1.0 - beta) * eval_drift(m, z + h * k3, tk + h) + beta * vk
            z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        else:
            b_k = (1.0 - beta) * f_k + beta * v
            z = z + h * b_k
            if m.mode == "sde":
                noise = rng.standard_normal((n, d))
                xi[:, k] = noise
                z = z + np.sqrt(h) * eval_diffusion(m, paths[:, k], tk) * noise
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite state at step {k + 1}")
        paths[:, k + 1] = z
    times = t0 + h * np.arange(n_steps + 1)
    return TrajectoryBatch(paths=paths, times=times, masses=np.ones(n),
                           drift_evals=drift_evals,
                           tape=_Tape(m.mode, method, float(t0), h, n_steps, xi))


def _zero_grads(mlp):
    return [np.zeros_like(p) for p in mlp.params()]


def _accum(acc, grads):
    for a, g in zip(acc, grads):
        a += g


def _drift_vjp(m, z, t, upstream, acc):
    """Backprop upstream through f(z, t); returns dL/dz."""
    zt, _ = _with_time(z, t)
    _, cache = mlp_forward_cached(m.drift, zt)
    grads, gin = mlp_backward(m.drift, cache, upstream)
    _accum(acc, grads)
    return gin[:, :-1]


def backprop_integrate(m, batch, d_paths, d_drift_evals=None):
    """Exact gradients of the recorded rollout.

    ``d_paths`` holds upstream gradients for every path point (cells,
    steps+1, d); ``d_drift_evals`` optionally adds gradients flowing into
    the stored raw drift values (the energy loss uses this).  Returns
    ({"drift": [...], "diffusion": [...]}, d_z0).
    """
    tape = batch.tape
    if tape is None:
        raise ValueError("batch has no recorded tape; integrate() must produce it")
    n, steps_p1, d = batch.paths.shape
    n_steps = tape.n_steps
    h, t0 = tape.h, tape.t0
    beta, gamma = m.momentum_beta, m.momentum_gamma

    g_drift = _zero_grads(m.drift)
    g_diff = _zero_grads(m.diffusion)

    # reconstruct the momentum sequence from the stored raw drift values
    v_seq = np.empty_like(batch.drift_evals)
    for k in range(n_steps):
        f_k = batch.drift_evals[:, k]
        v_seq[:, k] = f_k if k == 0 else gamma * v_seq[:, k - 1] + (1.0 - gamma) * f_k

    gz = np.array(d_paths[:, n_steps], dtype=np.float64)
    gv = np.zeros((n, d))
    for k in range(n_steps - 1, -1, -1):
        tk = t0 + k * h
        z_k = batch.paths[:, k]
        f_k = batch.drift_evals[:, k]
        g_f = np.zeros((n, d))
        gz_new = np.array(d_paths[:, k], dtype=np.float64)

        if tape.method == "rk4":
            vk = v_seq[:, k]
            k1 = (1.0 - beta) * f_k + beta * vk
            a2 = z_k + 0.5 * h * k1
            F2 = eval_drift(m, a2, tk + 0.5 * h)
            k2 = (1.0 - beta) * F2 + beta * vk
            a3 = z_k + 0.5 * h * k2
            F3 = eval_drift(m, a3, tk + 0.5 * h)
            k3 = (1.0 - beta) * F3 + beta * vk
            a4 = z_k + h * k3

            g_k1 = (h / 6.0) * gz
            g_k2 = (h / 3.0) * gz
            g_k3 = (h / 3.0) * gz
            g_k4 = (h / 6.0) * gz
            gz_new += gz  # identity path of z_{k+1} = z_k + ...

            # stage 4
            gv += beta * g_k4
            g_a4 = _drift_vjp(m, a4, tk + h, (1.0 - beta) * g_k4, g_drift)
            gz_new += g_a4
            g_k3 = g_k3 + h * g_a4
            # stage 3
            gv += beta * g_k3
            g_a3 = _drift_vjp(m, a3, tk + 0.5 * h, (1.0 - beta) * g_k3, g_drift)
            gz_new += g_a3
            g_k2 = g_k2 + 0.5 * h * g_a3
            # stage 2
            gv += beta * g_k2
            g_a2 = _drift_vjp(m, a2, tk + 0.5 * h, (1.0 - beta) * g_k2, g_drift)
            gz_new += g_a2
            g_k1 = g_k1 + 0.5 * h * g_a2
            # stage 1 reuses the stored raw drift
            gv += beta * g_k1
            g_f += (1.0 - beta) * g_k1
        else:
            g_b = h * gz
            gz_new += gz
            g_f += (1.0 - beta) * g_b
            gv += beta * g_b
            if tape.mode == "sde":
                zt, _ = _with_time(z_k, tk)
                _, cache = mlp_forward_cached(m.diffusion, zt)
                g_sigma = np.sqrt(h) * gz * tape.xi[:, k]
                grads, gin = mlp_backward(m.diffusion, cache, g_sigma)
                _accum(g_diff, grads)
                gz_new += gin[:, :-1]

        # momentum recurrence: v_k = f_k (k=0) or gamma v_{k-1} + (1-gamma) f_k
        if k == 0:
            g_f += gv
            gv = np.zeros((n, d))
        else:
            g_f += (1.0 - gamma) * gv
            gv = gamma * gv
        if d_drift_evals is not None:
            g_f += d_drift_evals[:, k]
        gz_new += _drift_vjp(m, z_k, tk, g_f, g_drift)
        gz = gz_new
    return {"drift": g_drift, "diffusion": g_diff}, gz
