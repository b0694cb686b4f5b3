"""Dense Gaussian-process density and sampling (small images only)."""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular

from .covariance import CovarianceError, MaternParams, cholesky_jitter, cov_matrix

__all__ = ["DENSE_LIMIT", "gp_logdensity", "gp_sample", "mvn_logdensity_chol"]

DENSE_LIMIT = 2000
_LOG2PI = math.log(2.0 * math.pi)


def _check_size(n: int, dense_limit: int) -> None:
    if n > dense_limit:
        raise CovarianceError(f"n={n} exceeds the dense limit {dense_limit}; use a scalable prior")


def mvn_logdensity_chol(w, L) -> float:
    """log MVN(w; 0, L L^T) given the lower Cholesky factor."""
    w = np.asarray(w, dtype=float)
    z = solve_triangular(L, w, lower=True)
    return float(-0.5 * (len(w) * _LOG2PI + z @ z) - np.sum(np.log(np.diag(L))))


def gp_logdensity(w, S, theta: MaternParams, dense_limit: int = DENSE_LIMIT) -> float:
    S = np.asarray(S, dtype=float)
    _check_size(len(S), dense_limit)
    L, _ = cholesky_jitter(cov_matrix(S, theta), theta.sigma2)
    return mvn_logdensity_chol(w, L)


def gp_sample(S, theta: MaternParams, rng_seed=None, dense_limit: int = DENSE_LIMIT) -> np.ndarray:
    """One draw from MVN(0, C(S, S | theta))."""
    S = np.asarray(S, dtype=float)
    _check_size(len(S), dense_limit)
    rng = np.random.default_rng(rng_seed)
    L, _ = cholesky_jitter(cov_matrix(S, theta), theta.sigma2)
    return L @ rng.standard_normal(len(S))
