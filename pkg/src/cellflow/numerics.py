"""Deterministic numeric substrate: RNG, PCA, kNN, small MLPs, Adam.

Everything is float64 and bit-reproducible from a seed.  Randomness goes
through counter-based Philox generators so parallel substreams derived
from (seed, stream keys) never perturb each other.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

ACTIVATIONS = ("tanh", "relu", "softplus", "identity")


class NumericError(RuntimeError):
    """Raised when a computation produces or receives non-finite values."""


def make_rng(seed, *stream):
    """Counter-based generator for (seed, stream...); same inputs, same bits."""
    ss = np.random.SeedSequence(entropy=int(seed),
                                spawn_key=tuple(int(s) & 0xFFFFFFFF for s in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class RngState:
    """Seed plus algorithm tag; ``substream(*keys)`` derives independent streams."""

    seed: int
    algorithm: str = "philox"

    def generator(self, *stream):
        return make_rng(self.seed, *stream)


def as_matrix(X, name="X"):
    """Validate a dense 2-D float64 array with finite entries."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericError(f"{name} contains non-finite entries")
    return X


def pairwise_sq_dists(X, Y=None):
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = X if Y is None else np.ascontiguousarray(Y, dtype=np.float64)
    return _kernels.pairwise_sq_dists(X, Y)


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaModel:
    """Top-d principal axes of centered data.

    ``components`` has orthonormal rows (output dim x input dim) and
    ``explained_variance`` the matching nonincreasing covariance eigenvalues.
    """

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    def transform(self, X):
        return (as_matrix(X) - self.mean) @ self.components.T

    def inverse_transform(self, Z):
        return as_matrix(Z, "Z") @ self.components + self.mean


def pca_fit(X, d):
    """Fit PCA by eigendecomposition of the sample covariance.

    Component signs are fixed so the largest-magnitude entry of each row is
    positive, which makes the fit deterministic across runs.
    """
    X = as_matrix(X)
    n, p = X.shape
    if n < 2:
        raise ValueError("pca_fit needs at least 2 rows")
    if not 1 <= d <= min(n, p):
        raise ValueError(f"d={d} out of range for shape {X.shape}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = (Xc.T @ Xc) / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:d]
    components = evecs[:, order].T.copy()
    for row in components:
        mags = np.abs(row)
        # ties in magnitude are resolved by lowest index so the convention
        # stays stable under float-level input reorderings
        anchor = int(np.flatnonzero(mags >= mags.max() * (1.0 - 1e-8))[0])
        if row[anchor] < 0:
            row *= -1.0
    return PcaModel(mean=mean, components=components,
                    explained_variance=np.maximum(evals[order], 0.0))


# ---------------------------------------------------------------------------
# exhaustive kNN


def knn_query(points, k, max_dist=None):
    """Indices of the k nearest other points, ties broken by lower index.

    Returns a list of int arrays; with ``max_dist`` set, neighbors farther
    than the cutoff are dropped, so lists may be shorter than k.
    """
    points = as_matrix(points, "points")
    n = points.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of points ({n})")
    D = np.sqrt(pairwise_sq_dists(points))
    np.fill_diagonal(D, np.inf)
    out = []
    for i in range(n):
        idx = np.argsort(D[i], kind="stable")[:k]
        if max_dist is not None:
            idx = idx[D[i, idx] <= max_dist]
        out.append(idx.astype(np.int64))
    return out


# ---------------------------------------------------------------------------
# small fully-connected networks with hand-rolled reverse mode


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    # inverse of log(1+e^x); y must be > 0
    return np.log(np.expm1(y))


def _act_forward(tag, z):
    if tag == "tanh":
        return np.tanh(z)
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "softplus":
        return softplus(z)
    if tag == "identity":
        return z
    raise ValueError(f"unknown activation {tag!r}")


def _act_backward(tag, z, a, grad):
    if tag == "tanh":
        return grad * (1.0 - a * a)
    if tag == "relu":
        return grad * (z > 0.0)
    if tag == "softplus":
        return grad / (1.0 + np.exp(-z))
    if tag == "identity":
        return grad
    raise ValueError(f"unknown activation {tag!r}")


@dataclass
class MlpModel:
    """Affine-plus-activation stack; weights[i] maps layer i to i+1 (out x in)."""

    layer_sizes: tuple
    weights: list
    biases: list
    activations: tuple

    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        return MlpModel(self.layer_sizes, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.activations)


def mlp_init(layer_sizes, activations, rng, scale=None):
    """Glorot-uniform initialized network; ``activations`` one tag per layer."""
    layer_sizes = tuple(int(s) for s in layer_sizes)
    activations = tuple(activations)
    if len(activations) != len(layer_sizes) - 1:
        raise ValueError("need one activation per layer")
    for tag in activations:
        if tag not in ACTIVATIONS:
            raise ValueError(f"unknown activation {tag!r}")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        lim = scale if scale is not None else np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(layer_sizes, weights, biases, activations)


def mlp_zeros(layer_sizes, activations):
    layer_sizes = tuple(int(s) for s in layer_sizes)
    weights = [np.zeros((o, i)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])]
    biases = [np.zeros(o) for o in layer_sizes[1:]]
    return MlpModel(layer_sizes, weights, biases, tuple(activations))


def _check_input(m, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != m.layer_sizes[0]:
        raise ValueError(f"input dim {X.shape[1]} != first layer size {m.layer_sizes[0]}")
    return X, single


def mlp_forward(m, x):
    """Forward pass; accepts a vector or a batch of row vectors."""
    X, single = _check_input(m, x)
    a = X
    for w, b, tag in zip(m.weights, m.biases, m.activations):
        a = _act_forward(tag, a @ w.T + b)
    return a[0] if single else a


def mlp_forward_cached(m, x):
    """Forward pass keeping pre/post-activation tensors for the backward pass."""
    X, single = _check_input(m, x)
    pre, post = [], [X]
    a = X
    for w, b, tag in zip(m.weights, m.biases, m.activations):
        z = a @ w.T + b
        a = _act_forward(tag, z)
        pre.append(z)
        post.append(a)
    return (a[0] if single else a), (pre, post, single)


def mlp_backward(m, cache, upstream):
    """Reverse accumulation from a cached forward pass.

    Returns ([dW0, db0, dW1, db1, ...], dX); parameter gradients are summed
    over the batch, the input gradient keeps the batch shape.
    """
    pre, post, single = cache
    G = np.asarray(upstream, dtype=np.float64)
    if single:
        G = G[None, :]
    grads = [None] * (2 * len(m.weights))
    for li in range(len(m.weights) - 1, -1, -1):
        G = _act_backward(m.activations[li], pre[li], post[li + 1], G)
        grads[2 * li] = G.T @ post[li]
        grads[2 * li + 1] = G.sum(axis=0)
        G = G @ m.weights[li]
    return grads, (G[0] if single else G)


def mlp_grad(m, x, upstream):
    """Gradients of upstream . output w.r.t. parameters and the input."""
    _, cache = mlp_forward_cached(m, x)
    return mlp_backward(m, cache, upstream)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params):
    return AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, lr_scales=None):
    """In-place Adam update with bias correction; returns (params, state).

    ``lr_scales`` optionally multiplies the step size per parameter array
    (used to slow the growth head relative to the drift network).
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {i}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        scale = lr if lr_scales is None else lr * lr_scales[i]
        p -= scale * mhat / (np.sqrt(vhat) + eps)
    return params, state
