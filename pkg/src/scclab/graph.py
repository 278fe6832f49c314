"""Cosine k-NN graph over hidden features and one-hop label smoothing.

Smoothing blends every node's soft labels with its neighbors' through the
symmetrically normalized operator D^{-1/2} (lam*I + A) D^{-1/2}, where
D(i,i) = lam + sum_j A(i,j). Confidence is re-read from the smoothed labels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse


@dataclass
class KnnGraph:
    """Undirected weighted k-NN graph.

    ``adjacency`` is a symmetric CSR matrix with zero diagonal; weights are
    cosine similarities clamped to [0, 1]. ``degrees[i] = lam + row sum``.
    """

    n: int
    k: int
    lam: float
    adjacency: sparse.csr_matrix
    degrees: np.ndarray

    @property
    def edge_count(self):
        return self.adjacency.nnz // 2


def build_knn(features, k, lam=0.5, ids=None):
    """Exact k-NN by cosine similarity with union symmetrization.

    Every node links to its ``k`` most similar other nodes; an edge survives
    if either endpoint selected it. Negative similarities are clamped to 0
    (kept as structural zero-weight edges). Zero-norm rows are rejected.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    norms = np.linalg.norm(features, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        shown = (np.asarray(ids)[bad] if ids is not None else bad).tolist()
        raise ValueError(f"zero-norm feature rows for ids {shown}")

    unit = features / norms[:, None]
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    picks = np.argpartition(-sims, k - 1, axis=1)[:, :k]

    src = np.repeat(np.arange(n), k)
    dst = picks.ravel()
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    pairs = np.unique(lo * n + hi)
    lo, hi = pairs // n, pairs % n
    weights = np.clip(sims[lo, hi], 0.0, 1.0)

    adjacency = sparse.csr_matrix(
        (np.concatenate([weights, weights]),
         (np.concatenate([lo, hi]), np.concatenate([hi, lo]))),
        shape=(n, n),
    )
    degrees = lam + np.asarray(adjacency.sum(axis=1)).ravel()
    return KnnGraph(n=n, k=k, lam=lam, adjacency=adjacency, degrees=degrees)


def gba_smooth(graph, label_matrix):
    """Apply D^{-1/2} (lam*I + A) D^{-1/2} to an (n, C) label matrix.

    The diagonal term is computed as (lam / d_i) * row_i, which is
    algebraically the same but keeps isolated nodes (d_i == lam) bit-exact
    fixed points.
    """
    p = np.asarray(label_matrix, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != graph.n:
        raise ValueError(f"label matrix shaped {p.shape}, expected ({graph.n}, C)")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("label matrix entries must lie in [0, 1]")
    d = graph.degrees
    if np.any(d <= 0):
        raise ValueError("zero total degree (isolated node with lam == 0): operator undefined")
    dinv_sqrt = 1.0 / np.sqrt(d)
    neighbor = graph.adjacency @ (dinv_sqrt[:, None] * p)
    return (graph.lam / d)[:, None] * p + dinv_sqrt[:, None] * neighbor


def smooth_artifacts(artifacts, k=10, lam=0.5, graph=None):
    """Replace self labels with their graph-smoothed version and re-read
    confidence from them (clamped to [0, 1]). Returns a new artifact bundle;
    the input is untouched. A prebuilt ``graph`` overrides k and lam.
    """
    if artifacts.web_labels is None:
        raise ValueError("artifacts carry no web labels; cannot re-extract confidence")
    g = graph if graph is not None else build_knn(
        artifacts.features, k=k, lam=lam, ids=artifacts.ids
    )
    smoothed = gba_smooth(g, artifacts.self_labels)
    n = smoothed.shape[0]
    scc = np.clip(smoothed[np.arange(n), artifacts.web_labels], 0.0, 1.0)
    return replace(artifacts, self_labels=smoothed, scc=scc)


def save_edges_csv(graph, path):
    """Debug dump: one ``src,dst,weight`` row per undirected edge (src < dst)."""
    coo = sparse.triu(graph.adjacency, k=1).tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["src", "dst", "weight"])
        for i in order:
            writer.writerow([int(coo.row[i]), int(coo.col[i]), f"{coo.data[i]:.17g}"])
