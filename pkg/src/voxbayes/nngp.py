"""Nearest Neighbor Gaussian Process.

Voxels are ordered by (x, y); each voxel conditions on at most ``m``
earlier voxels closest to it.  The joint density factorizes as

    prod_j N(w_j | B_j w_N(j), F_j)

which is a proper Gaussian with sparse precision (I - B)^T F^-1 (I - B).
All index arrays here are in the caller's original voxel indexing; the
ordering only decides which voxels may condition on which.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular

from .covariance import JITTER, CovarianceError, DistanceTable, MaternParams, pairwise_dist

__all__ = [
    "NeighborGraph",
    "NNGPFactor",
    "NNGPGeometry",
    "order_voxels",
    "build_neighbors",
    "nngp_factors",
    "nngp_logdensity",
    "nngp_sample",
    "nngp_precision",
    "greedy_coloring",
]

_LOG2PI = math.log(2.0 * math.pi)


def order_voxels(S) -> np.ndarray:
    """Permutation sorting voxels by x then y (stable)."""
    S = np.asarray(S, dtype=float)
    return np.lexsort((S[:, 1], S[:, 0]))


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """Directed acyclic neighbor graph.

    ``order[t]`` is the voxel at position t.  ``neighbors[t]`` holds the
    original indices of its conditioning set, padded with -1 to width m.
    """

    order: np.ndarray
    neighbors: np.ndarray
    counts: np.ndarray

    @property
    def n(self) -> int:
        return len(self.order)

    @property
    def m(self) -> int:
        return self.neighbors.shape[1]

    def neighbor_set(self, t: int) -> np.ndarray:
        return self.neighbors[t, : self.counts[t]]


def build_neighbors(S, m: int, order=None) -> NeighborGraph:
    """Nearest earlier neighbors for each voxel in ``order``.

    Position t gets the min(t, m) earlier voxels closest in Euclidean
    distance; ties go to the smaller position.  ``order=None`` treats ``S``
    as already ordered.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    S = np.asarray(S, dtype=float)
    n = len(S)
    order = np.arange(n) if order is None else np.asarray(order, dtype=np.int64)
    P = S[order]
    nb_pos = np.full((n, m), -1, dtype=np.int64)
    counts = np.minimum(np.arange(n), m)
    for t in range(1, n):
        d = np.hypot(P[:t, 0] - P[t, 0], P[:t, 1] - P[t, 1])
        if t > m:
            kth = np.partition(d, m - 1)[m - 1]
            cand = np.flatnonzero(d <= kth)
        else:
            cand = np.arange(t)
        pick = cand[np.lexsort((cand, d[cand]))][:m]
        nb_pos[t, : len(pick)] = pick
    nb = np.where(nb_pos >= 0, order[np.maximum(nb_pos, 0)], -1)
    return NeighborGraph(order, nb, counts)


@dataclass(frozen=True, eq=False)
class NNGPFactor:
    """Kriging weights ``B`` (n, m; zero-padded) and conditional variances ``F`` by position."""

    graph: NeighborGraph
    B: np.ndarray
    F: np.ndarray
    sigma2: float
    jittered: bool = False

    @property
    def n(self) -> int:
        return self.graph.n

    def scaled(self, factor: float) -> "NNGPFactor":
        """Factors for the same correlation with sigma2 multiplied by ``factor``."""
        return NNGPFactor(self.graph, self.B, self.F * factor, self.sigma2 * factor, self.jittered)


class NNGPGeometry:
    """Theta-independent pieces of an image's NNGP, reused across theta proposals."""

    def __init__(self, S, m: int, graph: NeighborGraph | None = None):
        S = np.asarray(S, dtype=float)
        self.S = S
        self.graph = graph if graph is not None else build_neighbors(S, m, order_voxels(S))
        g = self.graph
        n, mm = g.neighbors.shape
        self.pad = g.neighbors < 0
        nb = np.where(self.pad, 0, g.neighbors)
        self._nb = nb
        if n <= mm * mm:
            # neighbour blocks outnumber voxel pairs: index one pairwise table
            full = DistanceTable(pairwise_dist(S))
            self._cross = full.take(g.order[:, None] * n + nb)
            self._block = full.take(nb[:, :, None] * n + nb[:, None, :])
        else:
            target = S[g.order]
            cross = np.hypot(S[nb, 0] - target[:, None, 0], S[nb, 1] - target[:, None, 1])
            block = np.hypot(S[nb][:, :, None, 0] - S[nb][:, None, :, 0], S[nb][:, :, None, 1] - S[nb][:, None, :, 1])
            self._cross = DistanceTable(cross)
            self._block = DistanceTable(block)
        # padded slots: identity block, zero cross-covariance -> zero weight
        self._pad_block = self.pad[:, :, None] | self.pad[:, None, :]
        self._pad_diag = self.pad[:, :, None] & np.eye(mm, dtype=bool)[None]
        self._coloring = None

    def factors(self, theta: MaternParams) -> NNGPFactor:
        s2 = theta.sigma2
        n, mm = self.pad.shape
        if mm == 0 or n == 0:
            return NNGPFactor(self.graph, np.zeros((n, mm)), np.full(n, s2), s2)
        c = self._cross.cov(theta)
        c[self.pad] = 0.0
        CN = self._block.cov(theta)
        CN[self._pad_block] = 0.0
        CN[self._pad_diag] = s2
        jittered = False
        try:
            B = np.linalg.solve(CN, c[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            B = None
        if B is None or not np.all(np.isfinite(B)):
            CN = CN + JITTER * s2 * np.eye(mm)[None]
            jittered = True
            try:
                np.linalg.cholesky(CN)
                B = np.linalg.solve(CN, c[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                raise CovarianceError("singular neighbor covariance after jitter") from None
        B[self.pad] = 0.0
        F = s2 - np.einsum("ij,ij->i", c, B)
        if np.any(F <= 0):
            floor = JITTER * s2
            if np.any(F < -floor):
                raise CovarianceError("non-positive NNGP conditional variance")
            F = np.maximum(F, floor)
            jittered = True
        return NNGPFactor(self.graph, B, F, s2, jittered)

    def precision_layout(self):
        """Scatter map assembling the precision's CSR data straight from (B, F).

        P = sum_j a_j a_j^T / F_j with a_j = e_j - B_j on {j} and N(j).  Rows
        of the returned pattern are permuted so that each color class is a
        contiguous block; columns keep the original indexing.  Returns
        (indptr, indices, slot, class_bounds, perm) where ``slot`` has shape
        (n, m+1, m+1) and holds the data index of each pair (-1 for padding).
        """
        if getattr(self, "_layout", None) is None:
            g = self.graph
            n, mm = g.neighbors.shape
            classes = self.coloring()
            perm = np.concatenate(classes)
            pos = np.empty(n, dtype=np.int64)
            pos[perm] = np.arange(n)
            idx = np.concatenate([g.order[:, None], g.neighbors], axis=1)  # (n, m+1), -1 padded
            valid = idx >= 0
            ii = np.where(valid, idx, 0)
            pair_keys = pos[ii][:, :, None] * n + ii[:, None, :]
            ok = valid[:, :, None] & valid[:, None, :]
            keys = np.unique(pair_keys[ok])
            slot = np.where(ok, np.searchsorted(keys, pair_keys), -1)
            indptr = np.zeros(n + 1, dtype=np.int64)
            indptr[1:] = np.cumsum(np.bincount(keys // n, minlength=n))
            bounds = np.cumsum([0] + [len(K) for K in classes])
            self._layout = (indptr, keys % n, slot, bounds, perm)
        return self._layout

    def precision_data(self, factors: NNGPFactor) -> np.ndarray:
        """CSR data for the layout of ``precision_layout``."""
        indptr, indices, slot, _, _ = self.precision_layout()
        n = len(factors.F)
        a = np.concatenate([np.ones((n, 1)), -factors.B], axis=1)
        contrib = a[:, :, None] * a[:, None, :] / factors.F[:, None, None]
        ok = slot >= 0
        return np.bincount(slot[ok], weights=contrib[ok], minlength=len(indices))

    def pattern(self) -> sp.csr_matrix:
        """Structural nonzeros of the precision, independent of numeric values.

        Voxels j and k interact when both lie in some {i} + N(i).  Building
        the pattern from these pairs avoids losing entries to exact
        cancellation, which a numeric product with placeholder weights can.
        """
        g = self.graph
        n = g.n
        idx = np.concatenate([g.order[:, None], g.neighbors], axis=1)
        ok = idx >= 0
        rows = np.broadcast_to(idx[:, :, None], idx.shape + (idx.shape[1],))
        cols = np.broadcast_to(idx[:, None, :], idx.shape + (idx.shape[1],))
        pair_ok = ok[:, :, None] & ok[:, None, :]
        P = sp.csr_matrix((np.ones(int(pair_ok.sum())), (rows[pair_ok], cols[pair_ok])), shape=(n, n))
        P.sum_duplicates()
        P.sort_indices()
        return P

    def coloring(self) -> list[np.ndarray]:
        """Color classes of the precision graph; each class is conditionally independent."""
        if self._coloring is None:
            self._coloring = greedy_coloring(self.pattern(), self.graph.order)
        return self._coloring


def nngp_factors(graph: NeighborGraph, S, theta: MaternParams) -> NNGPFactor:
    """B/F factors for ``graph`` over coordinates ``S``."""
    return NNGPGeometry(S, graph.m, graph).factors(theta)


def _conditional_means(w, f: NNGPFactor) -> np.ndarray:
    nb = np.where(f.graph.neighbors < 0, 0, f.graph.neighbors)
    return np.einsum("ij,ij->i", f.B, w[nb])


def nngp_logdensity(w, factors: NNGPFactor) -> float:
    w = np.asarray(w, dtype=float)
    if len(w) != factors.n:
        raise ValueError(f"w has length {len(w)}, graph has {factors.n} voxels")
    resid = w[factors.graph.order] - _conditional_means(w, factors)
    F = factors.F
    return float(-0.5 * (len(w) * _LOG2PI + np.sum(np.log(F)) + np.sum(resid * resid / F)))


def _lower_operator(factors: NNGPFactor, positions: bool) -> sp.csr_matrix:
    """(I - B), either in position space or in original indexing."""
    g = factors.graph
    n, m = g.neighbors.shape
    if positions:
        inv = np.empty(n, dtype=np.int64)
        inv[g.order] = np.arange(n)
        rows = np.repeat(np.arange(n), m)
        cols_orig = g.neighbors.ravel()
        mask = cols_orig >= 0
        cols = inv[np.maximum(cols_orig, 0)]
        diag_rows = np.arange(n)
    else:
        rows = np.repeat(g.order, m)
        cols = g.neighbors.ravel()
        mask = cols >= 0
        diag_rows = g.order
    data = -factors.B.ravel()[mask]
    A = sp.csr_matrix(
        (np.concatenate([np.ones(n), data]), (np.concatenate([diag_rows, rows[mask]]), np.concatenate([diag_rows, cols[mask]]))),
        shape=(n, n),
    )
    return A


def nngp_sample(factors: NNGPFactor, rng_seed=None) -> np.ndarray:
    """Ancestral draw w_j = B_j w_N(j) + sqrt(F_j) z_j, returned in original indexing."""
    rng = np.random.default_rng(rng_seed)
    n = factors.n
    e = np.sqrt(factors.F) * rng.standard_normal(n)
    A = _lower_operator(factors, positions=True)
    w_pos = spsolve_triangular(A, e, lower=True) if n > 1 else e
    w = np.empty(n)
    w[factors.graph.order] = w_pos
    return w


def nngp_precision(factors: NNGPFactor) -> sp.csr_matrix:
    """Sparse precision (I - B)^T F^-1 (I - B) in original indexing."""
    g = factors.graph
    A = _lower_operator(factors, positions=False)
    Finv = np.empty(g.n)
    Finv[g.order] = 1.0 / factors.F
    P = (A.T @ sp.diags(Finv) @ A).tocsr()
    P = ((P + P.T) * 0.5).tocsr()
    P.sort_indices()
    return P


def greedy_coloring(P: sp.spmatrix, visit=None) -> list[np.ndarray]:
    """Greedy vertex coloring of the sparsity graph of ``P``."""
    P = sp.csr_matrix(P)
    n = P.shape[0]
    visit = np.arange(n) if visit is None else np.asarray(visit)
    color = np.full(n, -1, dtype=np.int64)
    indptr, indices = P.indptr, P.indices
    for v in visit:
        nbr = indices[indptr[v] : indptr[v + 1]]
        used = set(color[nbr].tolist())
        c = 0
        while c in used:
            c += 1
        color[v] = c
    return [np.flatnonzero(color == k) for k in range(color.max() + 1)]
