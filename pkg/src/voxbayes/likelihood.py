"""Class-conditional Gaussian feature model shared by fitting and prediction.

Features of voxel j in image i follow MVN(mu[c, r] + delta_i, gamma[c, r]).
Voxels with missing features contribute the marginal density of their
observed sub-vector; voxels with no observed feature contribute nothing.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

__all__ = ["feature_loglik", "stratum_stats", "draw_mvn_canonical", "draw_delta"]

_LOG2PI = math.log(2.0 * math.pi)


def _mvn_logpdf_rows(R, cov) -> np.ndarray:
    """Log density of each row of the residual matrix R under MVN(0, cov)."""
    L = np.linalg.cholesky(cov)
    Z = solve_triangular(L, R.T, lower=True)
    k = cov.shape[0]
    return -0.5 * (k * _LOG2PI + np.sum(Z * Z, axis=0)) - np.sum(np.log(np.diag(L)))


def feature_loglik(y, region, mu, gamma, delta=None) -> np.ndarray:
    """log f(y_j | c, r_j) for c = 0, 1; shape (n, 2).

    ``y`` is (n, d) with NaN marking missing entries; ``mu`` is (2, 2, d) and
    ``gamma`` (2, 2, d, d), both indexed [c, r].
    """
    y = np.asarray(y, dtype=float)
    region = np.asarray(region)
    n, d = y.shape
    shift = np.zeros(d) if delta is None else np.asarray(delta, dtype=float)
    out = np.zeros((n, 2))
    obs = ~np.isnan(y)
    patterns, inv = np.unique(obs, axis=0, return_inverse=True)
    inv = np.asarray(inv).ravel()
    for p, pat in enumerate(patterns):
        if not pat.any():
            continue
        rows_p = inv == p
        for r in (0, 1):
            rows = np.flatnonzero(rows_p & (region == r))
            if len(rows) == 0:
                continue
            Y = y[np.ix_(rows, pat)]
            for c in (0, 1):
                m = (mu[c][r] + shift)[pat]
                G = np.asarray(gamma[c][r])[np.ix_(pat, pat)]
                out[rows, c] = _mvn_logpdf_rows(Y - m, G)
    return out


def stratum_stats(y, region, labels):
    """Counts, sums and cross products per (c, r) stratum over complete voxels.

    Returns (count (2, 2), ysum (2, 2, d), yy (2, 2, d, d)).
    """
    y = np.asarray(y, dtype=float)
    d = y.shape[1]
    ok = ~np.isnan(y).any(axis=1)
    count = np.zeros((2, 2))
    ysum = np.zeros((2, 2, d))
    yy = np.zeros((2, 2, d, d))
    for c in (0, 1):
        for r in (0, 1):
            sel = ok & (labels == c) & (region == r)
            Y = y[sel]
            count[c, r] = len(Y)
            ysum[c, r] = Y.sum(axis=0)
            yy[c, r] = Y.T @ Y
    return count, ysum, yy


def draw_mvn_canonical(Q, b, rng) -> np.ndarray:
    """Draw from MVN(Q^-1 b, Q^-1)."""
    L = np.linalg.cholesky(Q)
    mean = cho_solve((L, True), b)
    return mean + solve_triangular(L, rng.standard_normal(len(b)), lower=True, trans="T")


def draw_delta(count, ysum, mu, gamma_inv, Sigma_inv, rng) -> np.ndarray:
    """Conditional draw of one image's shift delta.

    Prior delta ~ MVN(0, Sigma); each stratum contributes
    count * Gamma^-1 to the precision and Gamma^-1 (ysum - count * mu) to
    the linear term.
    """
    Q = np.array(Sigma_inv, dtype=float)
    b = np.zeros(Q.shape[0])
    for c in (0, 1):
        for r in (0, 1):
            nk = count[c, r]
            if nk == 0:
                continue
            Q += nk * gamma_inv[c, r]
            b += gamma_inv[c, r] @ (ysum[c, r] - nk * mu[c, r])
    return draw_mvn_canonical(Q, b, rng)


def spd_inverse(A) -> np.ndarray:
    """Inverse of an SPD matrix via Cholesky (raises LinAlgError if not SPD)."""
    c = cho_factor(A, lower=True)
    inv = cho_solve(c, np.eye(A.shape[0]))
    return (inv + inv.T) / 2.0
