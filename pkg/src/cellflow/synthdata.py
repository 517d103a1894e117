"""Synthetic benchmark data: regulatory-network simulations and toy sets.

Gene expression follows dx_i/dt = b_i + sum_j w_ij Hill(x_j) - lam_i x_i
plus Gaussian noise with variance proportional to expression, integrated by
Euler-Maruyama with a reflecting clamp at zero.  Master regulators have no
incoming edges; lineages are produced by linearly interpolating their
driven levels between the programs of connected cell states.  The toy sets
are analytic 2-D Gaussian-mixture trajectories with controllable mass
dynamics (branching, dying, growing, arc).
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .numerics import NumericError, make_rng


@dataclass
class GrnSpec:
    """Regulatory network: edges are (target, regulator, weight, hill_k, hill_n)."""

    n_genes: int
    edges: list
    basal: np.ndarray
    decay: np.ndarray
    master_regulators: np.ndarray
    programs: dict           # state -> target level per master regulator
    state_graph: list        # (source state, destination state)
    noise_scale: float = 0.1

    def __post_init__(self):
        self.basal = np.asarray(self.basal, dtype=np.float64)
        self.decay = np.asarray(self.decay, dtype=np.float64)
        self.master_regulators = np.asarray(self.master_regulators, dtype=np.int64)
        if np.any(self.decay <= 0):
            raise ValueError("decay rates must be positive")
        if np.any(self.basal < 0):
            raise ValueError("basal rates must be nonnegative")
        mr = set(self.master_regulators.tolist())
        for tgt, reg, w, k, n in self.edges:
            if tgt in mr:
                raise ValueError(f"master regulator {tgt} must have no incoming edges")
            if k <= 0 or n < 1:
                raise ValueError("hill constants must satisfy K > 0, n >= 1")
        states = set()
        for s, t in self.state_graph:
            states.update((s, t))
        for st in states:
            if st not in self.programs:
                raise ValueError(f"state {st!r} has no master-regulator program")

    def edge_arrays(self):
        if not self.edges:
            z = np.zeros(0)
            return z.astype(np.int64), z.astype(np.int64), z, z, z
        tgt, reg, w, k, n = map(np.asarray, zip(*self.edges))
        return (tgt.astype(np.int64), reg.astype(np.int64),
                w.astype(np.float64), k.astype(np.float64), n.astype(np.float64))


@dataclass
class SyntheticDataset:
    expression: np.ndarray   # cells x genes (2-D coordinates for toy sets)
    timepoints: np.ndarray   # int snapshot label per cell
    branches: np.ndarray     # int branch/state label per cell
    times: np.ndarray        # ground-truth continuous time per cell
    meta: dict = field(default_factory=dict)

    def split_by_timepoint(self):
        labels = np.unique(self.timepoints)
        return [self.expression[self.timepoints == t] for t in labels]


def grn_step(spec, x, dt, rng, basal=None):
    """One Euler-Maruyama step; noise std is noise_scale * sqrt(x) * sqrt(dt)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.ascontiguousarray(x[None, :] if single else x)
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite expression state")
    if dt <= 0:
        raise ValueError("dt must be positive")
    B = spec.basal if basal is None else np.asarray(basal, dtype=np.float64)
    B = np.ascontiguousarray(np.broadcast_to(B, X.shape).astype(np.float64))
    noise = (rng.standard_normal(X.shape) if spec.noise_scale > 0
             else np.zeros_like(X))
    tgt, reg, w, k, n = spec.edge_arrays()
    out = _kernels.grn_step(X, B, spec.decay, tgt, reg, w, k, n,
                            float(dt), float(spec.noise_scale), noise)
    return out[0] if single else out


def _program_basal(spec, mr_targets, n_cells):
    """Basal matrix where master regulators are driven toward mr_targets."""
    B = np.tile(spec.basal, (n_cells, 1))
    B[:, spec.master_regulators] = spec.decay[spec.master_regulators] * mr_targets
    return B


def _relax(spec, x, program, steps, dt, rng):
    B = _program_basal(spec, program, x.shape[0])
    arrs = spec.edge_arrays()
    for _ in range(steps):
        x = _kernels.grn_step(np.ascontiguousarray(x), B, spec.decay, *arrs,
                              float(dt), float(spec.noise_scale),
                              rng.standard_normal(x.shape))
    return x


def simulate_lineages(spec, n_cells, steps, rng, dt=0.05, burn_in=60,
                      n_timepoints=5):
    """Sample cells uniformly along all state-graph transitions.

    Each transition interpolates the master-regulator program from source
    to destination over ``steps`` integration steps; every cell is a
    snapshot of its own stochastic trajectory at a uniformly drawn step.
    Ground-truth time is edge depth plus the position along the edge.
    """
    if not spec.state_graph:
        raise ValueError("state graph must contain at least one transition")
    edges = spec.state_graph
    n_edges = len(edges)
    counts = [n_cells // n_edges + (1 if i < n_cells % n_edges else 0)
              for i in range(n_edges)]
    depth = _state_depths(edges)

    arrs = spec.edge_arrays()
    expr_parts, time_parts, branch_parts = [], [], []
    for e_idx, ((src, dst), n_e) in enumerate(zip(edges, counts)):
        if n_e == 0:
            continue
        prog_s = np.asarray(spec.programs[src], dtype=np.float64)
        prog_d = np.asarray(spec.programs[dst], dtype=np.float64)
        x = np.tile(spec.basal / spec.decay, (n_e, 1))
        x = _relax(spec, x, prog_s, burn_in, dt, rng)
        snap_step = np.sort(rng.integers(0, steps + 1, size=n_e))
        snapshots = np.empty_like(x)
        taken = snap_step == 0
        snapshots[taken] = x[taken]
        for j in range(steps):
            alpha = (j + 1) / steps
            target = (1.0 - alpha) * prog_s + alpha * prog_d
            B = _program_basal(spec, target, n_e)
            x = _kernels.grn_step(np.ascontiguousarray(x), B, spec.decay, *arrs,
                                  float(dt), float(spec.noise_scale),
                                  rng.standard_normal(x.shape))
            hit = snap_step == j + 1
            snapshots[hit] = x[hit]
        expr_parts.append(snapshots)
        time_parts.append(depth[src] + snap_step / steps)
        branch_parts.append(np.full(n_e, e_idx, dtype=np.int64))

    expression = np.concatenate(expr_parts)
    times = np.concatenate(time_parts)
    branches = np.concatenate(branch_parts)
    t_max = times.max()
    timepoints = np.minimum((times / (t_max + 1e-12) * n_timepoints).astype(np.int64),
                            n_timepoints - 1)
    return SyntheticDataset(expression=expression, timepoints=timepoints,
                            branches=branches, times=times,
                            meta={"n_cells": int(expression.shape[0]),
                                  "n_genes": spec.n_genes})


def _state_depths(edges):
    """Longest-path depth of each state from the roots (edges define a DAG
    except for the designated cycle chains, which are listed in order)."""
    depth = {}
    for src, dst in edges:
        depth.setdefault(src, 0)
        cand = depth[src] + 1
        if depth.get(dst, -1) < cand:
            depth[dst] = cand
    return depth


def technical_noise(expr, library_scale_range=(1.0, 1.0), dropout_p=0.0,
                    rng=None, poisson=False):
    """Library-size scaling, Bernoulli dropout, and optional Poisson sampling."""
    if not 0.0 <= dropout_p <= 1.0:
        raise ValueError("dropout_p must be in [0, 1]")
    expr = np.asarray(expr, dtype=np.float64)
    lo, hi = library_scale_range
    out = expr.copy()
    if (lo, hi) != (1.0, 1.0):
        factors = np.exp(rng.uniform(np.log(lo), np.log(hi), size=expr.shape[0]))
        out = out * factors[:, None]
    if dropout_p > 0.0:
        out = out * (rng.random(expr.shape) >= dropout_p)
    if poisson:
        out = rng.poisson(np.maximum(out, 0.0)).astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# regulatory-network presets


def trifurcation_spec(n_genes=100, seed=0, noise_scale=0.15):
    """One progenitor program branching into three fates.

    Master regulators 0..3 drive the progenitor and the three fate modules;
    the remaining genes split evenly into four activated modules.  This
    wiring is a shipped default, chosen for cleanly separable endpoints.
    """
    rng = make_rng(seed, 41)
    if n_genes < 8:
        raise ValueError("need at least 8 genes")
    mrs = np.arange(4)
    edges = []
    module_of = np.zeros(n_genes, dtype=np.int64)
    downstream = np.arange(4, n_genes)
    for pos, g in enumerate(downstream):
        mr = pos % 4
        module_of[g] = mr
        edges.append((int(g), int(mr), float(rng.uniform(1.8, 3.0)),
                      float(rng.uniform(0.8, 1.4)), 2.0))
    basal = rng.uniform(0.05, 0.15, size=n_genes)
    decay = rng.uniform(0.9, 1.1, size=n_genes)
    hi, lo = 2.5, 0.1
    programs = {
        "P": np.array([hi, lo, lo, lo]),
        "A": np.array([lo, hi, lo, lo]),
        "B": np.array([lo, lo, hi, lo]),
        "C": np.array([lo, lo, lo, hi]),
    }
    state_graph = [("P", "A"), ("P", "B"), ("P", "C")]
    return GrnSpec(n_genes=n_genes, edges=edges, basal=basal, decay=decay,
                   master_regulators=mrs, programs=programs,
                   state_graph=state_graph, noise_scale=noise_scale)


def trifurcation(seed=0, n_cells=500, n_genes=100, steps=120, n_timepoints=5):
    spec = trifurcation_spec(n_genes=n_genes, seed=seed)
    rng = make_rng(seed, 43)
    return simulate_lineages(spec, n_cells, steps, rng, n_timepoints=n_timepoints)


def s_shape_spec(n_genes=1000, seed=0, noise_scale=0.12):
    """Cell-cycle-like loop of programs followed by a bifurcation."""
    rng = make_rng(seed, 47)
    mrs = np.arange(4)  # 0,1: cycle phase drivers; 2,3: fate drivers
    edges = []
    downstream = np.arange(4, n_genes)
    for pos, g in enumerate(downstream):
        mr = pos % 4
        edges.append((int(g), int(mr), float(rng.uniform(1.5, 2.8)),
                      float(rng.uniform(0.8, 1.4)), 2.0))
    basal = rng.uniform(0.05, 0.15, size=n_genes)
    decay = rng.uniform(0.9, 1.1, size=n_genes)
    hi, lo, mid = 2.5, 0.1, 1.3
    programs = {
        "C0": np.array([hi, lo, lo, lo]),
        "C1": np.array([hi, hi, lo, lo]),
        "C2": np.array([lo, hi, lo, lo]),
        "C3": np.array([mid, mid, lo, lo]),
        "F1": np.array([lo, lo, hi, lo]),
        "F2": np.array([lo, lo, lo, hi]),
    }
    state_graph = [("C0", "C1"), ("C1", "C2"), ("C2", "C3"),
                   ("C3", "F1"), ("C3", "F2")]
    return GrnSpec(n_genes=n_genes, edges=edges, basal=basal, decay=decay,
                   master_regulators=mrs, programs=programs,
                   state_graph=state_graph, noise_scale=noise_scale)


def s_shape(seed=0, n_cells=990, subsample=315, n_genes=1000, steps=100,
            n_timepoints=5):
    """Cycle-plus-bifurcation simulation subsampled to the final size."""
    spec = s_shape_spec(n_genes=n_genes, seed=seed)
    rng = make_rng(seed, 53)
    full = simulate_lineages(spec, n_cells, steps, rng, n_timepoints=n_timepoints)
    keep = np.sort(make_rng(seed, 59).permutation(full.expression.shape[0])[:subsample])
    return SyntheticDataset(expression=full.expression[keep],
                            timepoints=full.timepoints[keep],
                            branches=full.branches[keep],
                            times=full.times[keep],
                            meta={"n_simulated": int(n_cells),
                                  "n_cells": int(keep.size),
                                  "n_genes": spec.n_genes})


# ---------------------------------------------------------------------------
# analytic 2-D toy sets


def _mixture(rng, means, counts, sigma):
    pts, labels = [], []
    for b, (m, c) in enumerate(zip(means, counts)):
        pts.append(m + sigma * rng.standard_normal((c, 2)))
        labels.append(np.full(c, b, dtype=np.int64))
    return np.concatenate(pts), np.concatenate(labels)


def toy_sets(kind, n, T, rng, sigma=0.25):
    """2-D Gaussian-mixture trajectories with known mass dynamics.

    kinds: "arc" one curved path; "branching" a split into two diverging
    branches; "dying" branch 1 loses 80% of its points by the last
    timepoint; "growing" branch 0 triples its share of the population.
    """
    if T < 2:
        raise ValueError("T must be >= 2")
    expr, tp, br, tgt = [], [], [], []
    split = T // 2
    for t in range(T):
        tau = t / (T - 1)
        if kind == "arc":
            ang = np.pi * (1.0 - tau)
            means = [3.0 * np.array([np.cos(ang), np.sin(ang)])]
            counts = [n]
        elif kind == "branching":
            x = 3.0 * tau
            if t < split:
                means = [np.array([x, 0.0]), np.array([x, 0.0])]
            else:
                dy = 1.5 * (t - split + 1) / max(T - split, 1)
                means = [np.array([x, dy]), np.array([x, -dy])]
            counts = [n - n // 2, n // 2]
        elif kind == "dying":
            x = 2.0 * tau
            means = [np.array([x, 1.5]), np.array([x, -1.5])]
            counts = [n - n // 2, int(round((n // 2) * (1.0 - 0.8 * tau)))]
        elif kind == "growing":
            x = 2.0 * tau
            means = [np.array([x, 1.5]), np.array([x, -1.5])]
            n_a0 = max(n // 4, 1)
            counts = [int(round(n_a0 * (1.0 + 8.0 * tau))), n - n // 4]
        else:
            raise ValueError(f"unknown toy set kind {kind!r}")
        pts, labels = _mixture(rng, means, counts, sigma)
        expr.append(pts)
        tp.append(np.full(pts.shape[0], t, dtype=np.int64))
        br.append(labels)
        tgt.append(np.full(pts.shape[0], float(t)))
    return SyntheticDataset(expression=np.concatenate(expr),
                            timepoints=np.concatenate(tp),
                            branches=np.concatenate(br),
                            times=np.concatenate(tgt),
                            meta={"kind": kind, "n": int(n), "T": int(T)})
