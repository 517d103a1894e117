"""Neighborhood-derived spatial features and the joint gene-spatial embedding.

A kNN graph with a distance cutoff is expanded to multi-hop neighborhoods;
each cell is then summarized by the cell-type frequencies, ligand-receptor
interaction potentials, and the mean expression-PCA embedding of its
neighbors.  The blocks are z-scored, concatenated, and PCA-reduced.
Features depend on the graph only, so they are invariant to rigid motions
of the coordinates.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import PcaModel, as_matrix, knn_query, pca_fit


@dataclass
class SpatialDataset:
    expression: np.ndarray   # cells x genes
    locations: np.ndarray    # cells x 2
    cell_types: np.ndarray   # int labels in [0, n_types)
    lr_pairs: list           # (ligand gene index, receptor gene index)

    def __post_init__(self):
        self.expression = as_matrix(self.expression, "expression")
        self.locations = as_matrix(self.locations, "locations")
        self.cell_types = np.asarray(self.cell_types, dtype=np.int64)
        n, g = self.expression.shape
        if self.locations.shape[0] != n or self.cell_types.shape[0] != n:
            raise ValueError("expression, locations, cell_types must align")
        if np.any(self.cell_types < 0):
            raise ValueError("cell type labels must be nonnegative")
        for lig, rec in self.lr_pairs:
            if not (0 <= lig < g and 0 <= rec < g):
                raise ValueError(f"ligand-receptor pair ({lig}, {rec}) out of range")

    @property
    def n_types(self):
        return int(self.cell_types.max()) + 1 if self.cell_types.size else 0


@dataclass
class SpatialFeaturesConfig:
    k: int = 5
    hops: int = 3
    max_dist: float = None
    expr_pca_dim: int = 20
    output_dim: int = 10


@dataclass
class SpatialFeatures:
    S: np.ndarray
    block_spans: dict        # name -> (start, stop) in the pre-reduction matrix
    pca_model: PcaModel


def build_cell_graph(locations, k, max_dist=None, hops=1):
    """Multi-hop neighborhoods on the distance-filtered kNN graph.

    kNN edges are made undirected, neighbors beyond ``max_dist`` dropped,
    and N(c) collects every node within ``hops`` hops of c, excluding c.
    Returns (neighborhoods, isolated) where isolated flags empty N(c);
    feature code falls back to the cell itself for those.
    """
    locations = as_matrix(locations, "locations")
    if k < 1 or hops < 1:
        raise ValueError("k and hops must be >= 1")
    n = locations.shape[0]
    nn = knn_query(locations, k, max_dist)
    adj = [set() for _ in range(n)]
    for i, neigh in enumerate(nn):
        for j in neigh:
            adj[i].add(int(j))
            adj[int(j)].add(i)
    hoods = []
    for c in range(n):
        seen = {c}
        frontier = [c]
        for _ in range(hops):
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        nxt.append(v)
            frontier = nxt
        seen.discard(c)
        hoods.append(np.array(sorted(seen), dtype=np.int64))
    isolated = np.array([h.size == 0 for h in hoods])
    return hoods, isolated


def celltype_frequencies(neighbors, cell_types, n_types):
    """Frequency of each type among the neighbors; sums to 1."""
    if len(neighbors) == 0:
        raise ValueError("empty neighborhood")
    counts = np.bincount(cell_types[neighbors], minlength=n_types).astype(np.float64)
    return counts / len(neighbors)


def lr_potentials(expression, cell, neighbors, lr_pairs):
    """Mean over neighbors of neighbor-ligand times self-receptor, per pair."""
    if len(neighbors) == 0:
        raise ValueError("empty neighborhood")
    out = np.empty(len(lr_pairs))
    for idx, (lig, rec) in enumerate(lr_pairs):
        out[idx] = np.mean(expression[neighbors, lig]) * expression[cell, rec]
    return out


def local_niche(embeddings, neighbors):
    """Mean embedding row over the neighborhood."""
    if len(neighbors) == 0:
        raise ValueError("empty neighborhood")
    return embeddings[neighbors].mean(axis=0)


def _zscore_block(block):
    mean = block.mean(axis=0)
    std = block.std(axis=0)
    out = np.where(std > 0, (block - mean) / np.where(std > 0, std, 1.0), 0.0)
    return out


def assemble_spatial_features(dataset, cfg):
    """Compute, z-score, concatenate, and PCA-reduce the three feature blocks."""
    n = dataset.expression.shape[0]
    M = dataset.n_types
    pca = pca_fit(dataset.expression, min(cfg.expr_pca_dim, *dataset.expression.shape))
    E = pca.transform(dataset.expression)
    hoods, isolated = build_cell_graph(dataset.locations, cfg.k, cfg.max_dist, cfg.hops)

    H = np.empty((n, M))
    Mp = np.empty((n, E.shape[1]))
    A = np.empty((n, len(dataset.lr_pairs)))
    for c in range(n):
        neigh = hoods[c] if not isolated[c] else np.array([c], dtype=np.int64)
        H[c] = celltype_frequencies(neigh, dataset.cell_types, M)
        Mp[c] = local_niche(E, neigh)
        A[c] = lr_potentials(dataset.expression, c, neigh, dataset.lr_pairs)

    blocks = [_zscore_block(H), _zscore_block(Mp), _zscore_block(A)]
    raw = np.concatenate(blocks, axis=1)
    spans = {"celltype_freq": (0, M),
             "niche": (M, M + Mp.shape[1]),
             "lr_potential": (M + Mp.shape[1], raw.shape[1])}
    if cfg.output_dim > raw.shape[1]:
        raise ValueError(f"output_dim {cfg.output_dim} exceeds feature width {raw.shape[1]}")
    reducer = pca_fit(raw, cfg.output_dim)
    return SpatialFeatures(S=reducer.transform(raw), block_spans=spans, pca_model=reducer)


def joint_embed(gene_latent, spatial_latent, s):
    """Concatenate per-block standardized latents as [gene | s * spatial].

    Each block is scaled to unit average column standard deviation first,
    so ``s`` is exactly the spatial-to-gene std ratio of the output.
    """
    G = as_matrix(gene_latent, "gene_latent")
    S = as_matrix(spatial_latent, "spatial_latent")
    if G.shape[0] != S.shape[0]:
        raise ValueError("row counts differ")

    def unit_std(block):
        avg = block.std(axis=0).mean()
        return block / avg if avg > 0 else block

    return np.concatenate([unit_std(G), s * unit_std(S)], axis=1)
