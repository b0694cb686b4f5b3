"""Knot-based predictive process (reduced-rank) approximation.

The field is represented by its values w* at ``a`` knots; voxel values are
the kriging interpolant  w~ = C(S, S*) C(S*)^-1 w*.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .covariance import CovarianceError, DistanceTable, MaternParams, cholesky_jitter, pairwise_dist
from .fullgp import mvn_logdensity_chol

__all__ = [
    "KnotSet",
    "KnotGeometry",
    "grid_points",
    "select_knots",
    "rr_interpolate",
    "rr_cov",
    "rr_sample",
    "rr_logdensity",
]


def grid_points(S, a: int) -> np.ndarray:
    """``a`` equally spaced grid points over the bounding box of ``S``.

    round(sqrt(a)) rows; points are spread as evenly as possible over the
    rows (extra points go to the middle rows) and sit at cell centers.
    """
    S = np.asarray(S, dtype=float)
    lo, hi = S.min(axis=0), S.max(axis=0)
    nrows = max(1, int(round(math.sqrt(a))))
    base, extra = divmod(a, nrows)
    counts = [base] * nrows
    mid = sorted(range(nrows), key=lambda r: (abs(r - (nrows - 1) / 2), r))
    for r in mid[:extra]:
        counts[r] += 1
    pts = []
    for r, k in enumerate(counts):
        y = lo[1] + (r + 0.5) * (hi[1] - lo[1]) / nrows
        for q in range(k):
            pts.append((lo[0] + (q + 0.5) * (hi[0] - lo[0]) / k, y))
    return np.array(pts)


def select_knots(S, a: int) -> np.ndarray:
    """Indices of ``a`` distinct voxels snapped to a regular grid.

    Each grid point takes its nearest voxel not already taken (ties to the
    smaller index).  ``a = 1`` uses the voxel nearest the centroid.
    """
    S = np.asarray(S, dtype=float)
    n = len(S)
    if not 1 <= a <= n:
        raise ValueError(f"need 1 <= a <= n, got a={a}, n={n}")
    targets = S.mean(axis=0, keepdims=True) if a == 1 else grid_points(S, a)
    D = pairwise_dist(targets, S)
    taken = np.zeros(n, dtype=bool)
    picks = []
    for q in range(len(targets)):
        d = np.where(taken, np.inf, D[q])
        k = int(np.lexsort((np.arange(n), d))[0])
        taken[k] = True
        picks.append(k)
    return np.array(picks, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class KnotSet:
    """Knots and the theta-dependent matrices built on them.

    ``interp`` is C(S, S*) C(S*)^-1 (n x a); ``chol`` is the lower factor of
    ``knot_cov``; ``whitened`` is C(S, S*) L^-T, so that interp @ w* equals
    whitened @ (L^-1 w*).
    """

    knot_index: np.ndarray
    knot_coords: np.ndarray
    interp: np.ndarray
    knot_cov: np.ndarray
    chol: np.ndarray
    whitened: np.ndarray
    theta: MaternParams

    @property
    def a(self) -> int:
        return len(self.knot_index)

    def scaled(self, factor: float) -> "KnotSet":
        """Same correlation, sigma2 multiplied by ``factor`` (interp is unchanged)."""
        r = math.sqrt(factor)
        return KnotSet(
            self.knot_index,
            self.knot_coords,
            self.interp,
            self.knot_cov * factor,
            self.chol * r,
            self.whitened * r,
            self.theta.with_sigma2(self.theta.sigma2 * factor),
        )


class KnotGeometry:
    """Knot placement and distance tables for one image; theta-free."""

    def __init__(self, S, a: int, knot_index=None):
        self.S = np.asarray(S, dtype=float)
        self.knot_index = select_knots(self.S, a) if knot_index is None else np.asarray(knot_index)
        K = self.S[self.knot_index]
        self.knot_coords = K
        self._cross = DistanceTable(pairwise_dist(self.S, K))
        self._knots = DistanceTable(pairwise_dist(K))

    def build(self, theta: MaternParams) -> KnotSet:
        Ck = self._knots.cov(theta)
        Ck = (Ck + Ck.T) / 2.0
        np.fill_diagonal(Ck, theta.sigma2)
        try:
            L, _ = cholesky_jitter(Ck, theta.sigma2)
        except CovarianceError:
            raise CovarianceError("singular knot covariance") from None
        Csk = self._cross.cov(theta)
        G = solve_triangular(L, Csk.T, lower=True).T
        H = solve_triangular(L, G.T, lower=True, trans="T").T
        return KnotSet(self.knot_index, self.knot_coords, H, Ck, L, G, theta)


def rr_interpolate(S, knots, theta: MaternParams) -> np.ndarray:
    """Kriging weights of every voxel onto the knots (n x a).

    ``knots`` is a KnotSet or an index array into ``S``.
    """
    idx = knots.knot_index if isinstance(knots, KnotSet) else np.asarray(knots)
    return KnotGeometry(S, len(idx), idx).build(theta).interp


def rr_cov(S, knots, theta: MaternParams) -> np.ndarray:
    """Rank-a covariance C(S,S*) C(S*)^-1 C(S*,S)."""
    idx = knots.knot_index if isinstance(knots, KnotSet) else np.asarray(knots)
    ks = KnotGeometry(S, len(idx), idx).build(theta)
    G = ks.whitened
    C = G @ G.T
    return (C + C.T) / 2.0


def rr_sample(knots: KnotSet, rng_seed=None) -> tuple[np.ndarray, np.ndarray]:
    """Draw knot values w* ~ MVN(0, C(S*)); returns (w*, interp @ w*)."""
    rng = np.random.default_rng(rng_seed)
    wstar = knots.chol @ rng.standard_normal(knots.a)
    return wstar, knots.interp @ wstar


def rr_logdensity(wstar, knots: KnotSet) -> float:
    """Log density of knot values under MVN(0, C(S*))."""
    return mvn_logdensity_chol(wstar, knots.chol)
