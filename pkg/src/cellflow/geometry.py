"""Diffusion-geometry target distances and the distance-matching autoencoder.

The target metric is a simplified diffusion potential distance: a Gaussian
kernel with adaptive per-point bandwidth is symmetrized and row-normalized
into a Markov operator, powered t times, and distances are taken between
log-transformed rows.  The autoencoder is trained so latent Euclidean
distances match these target distances while also reconstructing inputs.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .numerics import (NumericError, AdamState, MlpModel, adam_init, adam_step,
                       as_matrix, make_rng, mlp_backward, mlp_forward,
                       mlp_forward_cached, mlp_init, pairwise_sq_dists)

LOG_FLOOR = 1e-7  # added inside the log of powered-operator rows


@dataclass
class DiffusionOperator:
    """Row-stochastic Markov matrix with the kernel bandwidths that built it."""

    P: np.ndarray
    bandwidths: np.ndarray
    t: int


@dataclass
class PotentialDistances:
    D: np.ndarray


@dataclass
class GagaConfig:
    latent_dim: int = 2
    hidden: tuple = (64, 64)
    epochs: int = 200
    batch_size: int = 128
    lambda_geo: float = 1.0
    lambda_rec: float = 0.1
    lr: float = 1e-3
    seed: int = 0
    # target distances are rescaled so their median equals this value; the
    # metric is only defined up to scale and unit-median targets keep the
    # latent in the range a tanh network optimizes well.  None = raw scale.
    target_scale: float = 1.0


@dataclass
class GeoAutoencoder:
    encoder: MlpModel
    decoder: MlpModel
    lambda_geo: float
    lambda_rec: float
    loss_history: list = field(default_factory=list)


def diffusion_operator(X, k, t=8):
    """Adaptive-bandwidth Gaussian kernel, symmetrized and row-normalized.

    Bandwidth per point is the distance to its k-th nearest neighbor;
    zero bandwidths (duplicate points) borrow the smallest positive one.
    """
    X = as_matrix(X)
    n = X.shape[0]
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {n}")
    if t < 1:
        raise ValueError("t must be >= 1")
    D = np.sqrt(pairwise_sq_dists(X))
    # k-th neighbor distance, self excluded
    sorted_d = np.sort(D, axis=1)
    sigma = sorted_d[:, k]
    if np.all(sigma == 0):
        raise ValueError("all points identical: kernel bandwidth undefined")
    if np.any(sigma == 0):
        sigma = np.where(sigma == 0, sigma[sigma > 0].min(), sigma)
    K = np.exp(-(D ** 2) / (sigma[:, None] ** 2))
    K = 0.5 * (K + K.T)
    P = K / K.sum(axis=1, keepdims=True)
    return DiffusionOperator(P=P, bandwidths=sigma, t=int(t))


def potential_distances(op):
    """Euclidean distances between log rows of the powered operator."""
    M = np.linalg.matrix_power(op.P, op.t)
    L = np.log(M + LOG_FLOOR)
    D = np.sqrt(pairwise_sq_dists(L))
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return PotentialDistances(D=D)


def encode(ae, X):
    return mlp_forward(ae.encoder, np.asarray(X, dtype=np.float64))


def decode(ae, Z):
    return mlp_forward(ae.decoder, np.asarray(Z, dtype=np.float64))


def _pair_loss_grad(Z, D_target):
    """Mean squared mismatch between latent and target distances, with dZ."""
    B = Z.shape[0]
    n_pairs = B * (B - 1) / 2.0
    diff = Z[:, None, :] - Z[None, :, :]
    R = np.sqrt(np.maximum(np.sum(diff * diff, axis=2), 0.0))
    E = R - D_target
    np.fill_diagonal(E, 0.0)
    loss = float(np.sum(E ** 2) / (2.0 * n_pairs))
    W = E / (R + 1e-12)
    gZ = (2.0 / n_pairs) * np.sum(W[:, :, None] * diff, axis=1)
    return loss, gZ


def train_gaga(X, D_target, cfg):
    """Train the distance-matching autoencoder.

    Minimizes lambda_geo * mean over in-batch pairs of
    (||E(x_i) - E(x_j)|| - D_target[i, j])^2 plus lambda_rec * mean
    squared reconstruction error.  All pairs of a batch are used, so with
    batch_size >= n every pair of the dataset participates each epoch.
    """
    X = as_matrix(X)
    n, dim = X.shape
    Dt = D_target.D if isinstance(D_target, PotentialDistances) else np.asarray(D_target)
    if Dt.shape != (n, n):
        raise ValueError("D_target shape must be (n, n)")
    if cfg.target_scale is not None:
        positive = Dt[Dt > 0]
        if positive.size:
            Dt = Dt * (cfg.target_scale / np.median(positive))
    rng = make_rng(cfg.seed, 7)
    enc = mlp_init((dim, *cfg.hidden, cfg.latent_dim),
                   ("tanh",) * len(cfg.hidden) + ("identity",), rng)
    dec = mlp_init((cfg.latent_dim, *cfg.hidden, dim),
                   ("tanh",) * len(cfg.hidden) + ("identity",), rng)
    params = enc.params() + dec.params()
    state = adam_init(params)
    n_enc = len(enc.params())

    history = []
    order_rng = make_rng(cfg.seed, 11)
    B = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, B):
            idx = perm[start:start + B]
            if idx.size < 2:
                continue
            xb = X[idx]
            Z, enc_cache = mlp_forward_cached(enc, xb)
            geo_loss, gZ_geo = _pair_loss_grad(Z, Dt[np.ix_(idx, idx)])
            Xr, dec_cache = mlp_forward_cached(dec, Z)
            resid = Xr - xb
            rec_loss = float(np.mean(np.sum(resid ** 2, axis=1)))
            loss = cfg.lambda_geo * geo_loss + cfg.lambda_rec * rec_loss
            if not np.isfinite(loss):
                raise NumericError(f"non-finite autoencoder loss at epoch {epoch}")

            dXr = cfg.lambda_rec * 2.0 * resid / idx.size
            dec_grads, dZ_rec = mlp_backward(dec, dec_cache, dXr)
            dZ = cfg.lambda_geo * gZ_geo + dZ_rec
            enc_grads, _ = mlp_backward(enc, enc_cache, dZ)
            adam_step(params, enc_grads + dec_grads, state, cfg.lr)
            epoch_loss += loss
            n_batches += 1
        history.append(epoch_loss / max(n_batches, 1))
    return GeoAutoencoder(encoder=enc, decoder=dec, lambda_geo=cfg.lambda_geo,
                          lambda_rec=cfg.lambda_rec, loss_history=history)
