"""Matérn correlation and dense covariance assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, kve

__all__ = [
    "CovarianceError",
    "MaternParams",
    "matern_corr",
    "pairwise_dist",
    "cov_matrix",
    "cholesky_jitter",
    "DistanceTable",
    "JITTER",
]

# relative diagonal jitter, times sigma2
JITTER = 1e-8
_LOG2 = math.log(2.0)


class CovarianceError(ValueError):
    """Invalid kernel input or a covariance that cannot be factorized."""


@dataclass(frozen=True)
class MaternParams:
    sigma2: float
    phi: float
    nu: float

    def __post_init__(self):
        for name in ("sigma2", "phi", "nu"):
            val = float(getattr(self, name))
            if not (math.isfinite(val) and val > 0):
                raise CovarianceError(f"{name} must be positive and finite, got {val!r}")
            object.__setattr__(self, name, val)

    def log(self) -> np.ndarray:
        return np.log([self.sigma2, self.phi, self.nu])

    @classmethod
    def from_log(cls, v) -> "MaternParams":
        s, p, n = np.exp(np.asarray(v, dtype=float))
        return cls(float(s), float(p), float(n))

    def with_sigma2(self, sigma2: float) -> "MaternParams":
        return MaternParams(sigma2, self.phi, self.nu)


def matern_corr(dist, phi: float, nu: float):
    """Matérn correlation at distance(s) ``dist``.

    rho(d) = x^nu K_nu(x) / (2^(nu-1) Gamma(nu)) with x = 2 sqrt(nu) d / phi,
    equal to 1 at d = 0.  Vectorized over ``dist``.
    """
    d = np.asarray(dist, dtype=float)
    if not np.all(np.isfinite(d)):
        raise CovarianceError("distances must be finite")
    if np.any(d < 0):
        raise CovarianceError("distances must be nonnegative")
    if not (phi > 0 and nu > 0 and math.isfinite(phi) and math.isfinite(nu)):
        raise CovarianceError(f"phi and nu must be positive and finite (phi={phi!r}, nu={nu!r})")
    x = (2.0 * math.sqrt(nu) / phi) * d
    if nu == 0.5:
        return np.exp(-x)
    if nu == 1.5:
        return (1.0 + x) * np.exp(-x)
    if nu == 2.5:
        return (1.0 + x + x * x / 3.0) * np.exp(-x)
    out = np.ones_like(x)
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            logr = (1.0 - nu) * _LOG2 - gammaln(nu) + nu * np.log(xp) + np.log(kve(nu, xp)) - xp
            r = np.exp(logr)
        # kve overflows only for tiny x with large nu, where rho = 1 - O(x^2)
        r[~np.isfinite(logr)] = 1.0
        out[pos] = np.minimum(r, 1.0)
    return out if out.ndim else float(out)


def pairwise_dist(a, b=None) -> np.ndarray:
    """Euclidean distances between rows of ``a`` and rows of ``b``."""
    a = np.asarray(a, dtype=float)
    b = a if b is None else np.asarray(b, dtype=float)
    return np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])


def cov_matrix(S, theta: MaternParams, T=None) -> np.ndarray:
    """Covariance sigma2 * rho(||s_j - s_k||).

    With one argument returns the symmetric n x n matrix and rejects
    duplicate coordinates; with ``T`` returns the cross-covariance.
    """
    D = pairwise_dist(S, T)
    if T is None:
        off = D[~np.eye(len(D), dtype=bool)]
        if np.any(off == 0):
            raise CovarianceError("duplicate coordinates make the covariance singular")
    C = theta.sigma2 * matern_corr(D, theta.phi, theta.nu)
    if T is None:
        C = (C + C.T) / 2.0
        np.fill_diagonal(C, theta.sigma2)
    return C


def cholesky_jitter(C: np.ndarray, sigma2: float | None = None) -> tuple[np.ndarray, bool]:
    """Lower Cholesky factor, adding ``JITTER * sigma2`` to the diagonal on failure.

    Returns ``(L, jittered)``.
    """
    try:
        return np.linalg.cholesky(C), False
    except np.linalg.LinAlgError:
        pass
    scale = float(sigma2) if sigma2 is not None else float(np.max(np.diag(C)))
    try:
        return np.linalg.cholesky(C + JITTER * scale * np.eye(len(C))), True
    except np.linalg.LinAlgError:
        raise CovarianceError("covariance not positive definite after jitter") from None


class DistanceTable:
    """Distances of arbitrary shape, evaluated through their distinct values.

    Lattice images have few distinct inter-voxel distances, so covariance
    blocks for a new theta cost one kernel call per distinct distance.
    """

    def __init__(self, dist):
        dist = np.asarray(dist, dtype=float)
        self.shape = dist.shape
        self.unique, inverse = np.unique(dist.ravel(), return_inverse=True)
        self.inverse = inverse.reshape(-1)

    def take(self, flat_idx) -> "DistanceTable":
        """Table over entries picked by flat index from this one (no re-sorting)."""
        out = object.__new__(DistanceTable)
        idx = np.asarray(flat_idx)
        out.shape = idx.shape
        out.unique = self.unique
        out.inverse = self.inverse[idx.ravel()]
        return out

    def corr(self, phi: float, nu: float) -> np.ndarray:
        return matern_corr(self.unique, phi, nu)[self.inverse].reshape(self.shape)

    def cov(self, theta: MaternParams) -> np.ndarray:
        return theta.sigma2 * self.corr(theta.phi, theta.nu)
