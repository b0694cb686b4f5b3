"""Per-image spatial priors behind one interface used by the sampler.

Every field supports the operations the Gibbs/MH sweeps need:

* ``build(theta)``: theta-dependent matrices (cached by the caller)
* ``logdensity(state, built)``: prior log density of the field state
* ``gibbs(state, z, built, rng)``: draw the state from its full conditional
  when z ~ N(w, I) is observed (the probit latent minus its offset)
* ``values(state, built)``: per-voxel field values w
* ``sample(built, rng)``: a prior draw
* ``whiten(state, built)`` / ``unwhiten(e, built)``: the bijection between
  the state and standard-normal innovations e at fixed theta

The NNGP field also offers ``marginal(z, built)`` and
``conditional_draw(built, fac, rng)``: the log density of z with w
integrated out, and a joint draw of w given z from the same factorization.

For the reduced-rank field the state is the knot vector w*, otherwise it is
the per-voxel w itself.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded, solve_banded, solve_triangular
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .car import CARGeometry
from .covariance import MaternParams, cholesky_jitter, cov_matrix
from .fullgp import DENSE_LIMIT, mvn_logdensity_chol
from .nngp import NNGPGeometry, nngp_logdensity, nngp_precision, nngp_sample
from .reduced_rank import KnotGeometry, rr_logdensity

__all__ = ["make_field", "NNGPField", "RRField", "CARField", "DenseField"]


class _Field:
    kind = ""
    theta_dim = 3
    # theta enters the kappa likelihood, not only the prior of the state
    theta_in_likelihood = False

    def __init__(self, coords):
        self.coords = np.asarray(coords, dtype=float)
        self.n = len(self.coords)

    def zero_state(self) -> np.ndarray:
        return np.zeros(self.n)

    def values(self, state, built) -> np.ndarray:
        return state

    @staticmethod
    def theta_log(theta) -> np.ndarray:
        return theta.log()

    @staticmethod
    def theta_from_log(v):
        return MaternParams.from_log(v)

    @staticmethod
    def rescale_theta(theta, factor):
        return theta.with_sigma2(theta.sigma2 * factor)


class NNGPField(_Field):
    kind = "nngp"

    def __init__(self, coords, m: int = 10):
        super().__init__(coords)
        self.geometry = NNGPGeometry(self.coords, min(m, max(self.n - 1, 1)))
        self.classes = self.geometry.coloring()
        self.indptr, self.indices, _, self.bounds, _ = self.geometry.precision_layout()

    class Built:
        """Factors plus the precision data, assembled on first use.

        Rejected theta proposals only need the factors.
        """

        __slots__ = ("factors", "_geom", "_data", "_diag")

        def __init__(self, factors, geom, data=None, diag=None):
            self.factors = factors
            self._geom = geom
            self._data = data
            self._diag = diag

        def _ensure(self):
            if self._data is None:
                self._data = self._geom.precision_data(self.factors)
                g = self.factors.graph
                # diagonal of P: 1/F_j plus B_jk^2/F_k summed over children
                dg = np.zeros(g.n)
                dg[g.order] = 1.0 / self.factors.F
                nb = g.neighbors
                ok = nb >= 0
                np.add.at(dg, nb[ok], (self.factors.B**2 / self.factors.F[:, None])[ok])
                self._diag = dg

        @property
        def data(self):
            self._ensure()
            return self._data

        @property
        def diag(self):
            self._ensure()
            return self._diag

        @property
        def P(self):
            return nngp_precision(self.factors)

    def build(self, theta):
        return self.Built(self.geometry.factors(theta), self.geometry)

    def scaled(self, built, factor):
        data = None if built._data is None else built._data / factor
        diag = None if built._diag is None else built._diag / factor
        return self.Built(built.factors.scaled(factor), self.geometry, data, diag)

    def logdensity(self, state, built) -> float:
        return nngp_logdensity(state, built.factors)

    def gibbs(self, state, z, built, rng):
        """One sweep of single-site updates, vectorized within color classes."""
        w = np.array(state, dtype=float)
        data, diag = built.data, built.diag
        indptr, indices = self.indptr, self.indices
        q = diag + 1.0
        eps = rng.standard_normal(self.n)
        for k, K in enumerate(self.classes):
            a, b = self.bounds[k], self.bounds[k + 1]
            s, e = indptr[a], indptr[b]
            prod = data[s:e] * w[indices[s:e]]
            rowsum = np.add.reduceat(prod, indptr[a:b] - s)
            r = rowsum - diag[K] * w[K]
            w[K] = (z[K] - r) / q[K] + eps[K] / np.sqrt(q[K])
        return w

    def sample(self, built, rng):
        return nngp_sample(built.factors, rng)

    def _band_layout(self):
        """Reverse Cuthill-McKee order and a scatter map from the CSR data into
        upper banded storage of P + I (theta-free, computed once)."""
        if getattr(self, "_band", None) is None:
            *_, perm = self.geometry.precision_layout()
            rcm = reverse_cuthill_mckee(self.geometry.pattern(), symmetric_mode=True)
            bpos = np.empty(self.n, dtype=np.int64)
            bpos[rcm] = np.arange(self.n)
            rows = perm[np.repeat(np.arange(self.n), np.diff(self.indptr))]
            i, j = bpos[rows], bpos[self.indices]
            upper = i <= j
            u = int(np.max(j - i))
            flat = (u + i[upper] - j[upper]) * self.n + j[upper]
            self._band = (rcm, u, upper, flat)
        return self._band

    def marginal(self, z, built):
        """log N(z; 0, C + I) with w integrated out, and the factor reused by
        :meth:`conditional_draw`.  C is the NNGP covariance Q^-1, so
        |C + I| = |P + I| / |Q| and (C + I)^-1 = I - (P + I)^-1."""
        rcm, u, upper, flat = self._band_layout()
        ab = np.zeros((u + 1) * self.n)
        ab[flat] = built.data[upper]
        ab = ab.reshape(u + 1, self.n)
        ab[u] += 1.0
        try:
            cb = cholesky_banded(ab, lower=False, check_finite=False)
        except np.linalg.LinAlgError:
            return -np.inf, None
        zp = np.asarray(z, dtype=float)[rcm]
        mz = cho_solve_banded((cb, False), zp, check_finite=False)
        logdet = 2.0 * np.sum(np.log(cb[u])) + np.sum(np.log(built.factors.F))
        ll = -0.5 * (self.n * math.log(2 * math.pi) + logdet + zp @ zp - zp @ mz)
        return float(ll), (cb, mz)

    def conditional_draw(self, built, fac, rng) -> np.ndarray:
        """Joint draw of w given z ~ N(w, I), from the factor of :meth:`marginal`."""
        rcm, u, _, _ = self._band_layout()
        cb, mz = fac
        x = mz + solve_banded((0, u), cb, rng.standard_normal(self.n), check_finite=False)
        w = np.empty(self.n)
        w[rcm] = x
        return w

    def whiten(self, state, built) -> np.ndarray:
        f = built.factors
        g = f.graph
        w = np.asarray(state, dtype=float)
        nb = g.neighbors
        pred = np.where(nb >= 0, f.B * w[np.maximum(nb, 0)], 0.0).sum(axis=1)
        return (w[g.order] - pred) / np.sqrt(f.F)

    def _tri_index(self):
        if getattr(self, "_tri", None) is None:
            g = self.geometry.graph
            pos = np.empty(g.n, dtype=np.int64)
            pos[g.order] = np.arange(g.n)
            ok = g.neighbors >= 0
            rows = np.repeat(np.arange(g.n), ok.sum(axis=1))
            self._tri = (ok, rows, pos[g.neighbors[ok]])
        return self._tri

    def unwhiten(self, e, built) -> np.ndarray:
        # (I - B) w = sqrt(F) e is lower triangular in the ordering; at a few
        # hundred voxels a dense LAPACK solve beats the sparse one
        f = built.factors
        g = f.graph
        ok, rows, cols = self._tri_index()
        A = np.eye(g.n)
        A[rows, cols] = -f.B[ok]
        w_pos = solve_triangular(A, np.sqrt(f.F) * np.asarray(e, dtype=float), lower=True, check_finite=False)
        w = np.empty(g.n)
        w[g.order] = w_pos
        return w


class RRField(_Field):
    kind = "rr"
    theta_in_likelihood = True

    def __init__(self, coords, a: int = 10):
        super().__init__(coords)
        self.geometry = KnotGeometry(self.coords, min(a, self.n))
        self.a = len(self.geometry.knot_index)

    def zero_state(self):
        return np.zeros(self.a)

    def build(self, theta):
        return self.geometry.build(theta)

    def scaled(self, built, factor):
        return built.scaled(factor)

    def values(self, state, built):
        return built.interp @ state

    def logdensity(self, state, built) -> float:
        return rr_logdensity(state, built)

    def gibbs(self, state, z, built, rng):
        # whitened knots u = L^-1 w*: prior N(0, I), z = G u + noise
        G = built.whitened
        Q = np.eye(self.a) + G.T @ G
        Lq = np.linalg.cholesky(Q)
        mean = solve_triangular(Lq, solve_triangular(Lq, G.T @ z, lower=True), lower=True, trans="T")
        u = mean + solve_triangular(Lq, rng.standard_normal(self.a), lower=True, trans="T")
        return built.chol @ u

    def sample(self, built, rng):
        return built.chol @ rng.standard_normal(self.a)

    def whiten(self, state, built) -> np.ndarray:
        return solve_triangular(built.chol, state, lower=True)

    def unwhiten(self, e, built) -> np.ndarray:
        return built.chol @ e


class CARField(_Field):
    kind = "car"
    theta_dim = 1

    def __init__(self, coords, alpha: float = 0.99, cutoff: float | None = None):
        super().__init__(coords)
        self.geometry = CARGeometry(self.coords, alpha, cutoff)

    @staticmethod
    def theta_log(theta) -> np.ndarray:
        return np.array([math.log(theta)])

    @staticmethod
    def theta_from_log(v):
        return float(math.exp(v[0]))

    @staticmethod
    def rescale_theta(theta, factor):
        return theta * factor

    def build(self, theta):
        return float(theta)

    def scaled(self, built, factor):
        return built * factor

    def logdensity(self, state, built) -> float:
        return self.geometry.logdensity(state, built)

    def gibbs(self, state, z, built, rng):
        return self.geometry.conditional_draw(built, z, rng)

    def sample(self, built, rng):
        return self.geometry.sample(built, rng)

    # the precision is Q(alpha) / sigma2, so at fixed alpha w / sigma is
    # the theta-free coordinate
    def whiten(self, state, built) -> np.ndarray:
        return np.asarray(state) / math.sqrt(built)

    def unwhiten(self, e, built) -> np.ndarray:
        return np.asarray(e) * math.sqrt(built)


class DenseField(_Field):
    kind = "full"

    def __init__(self, coords, dense_limit: int = DENSE_LIMIT):
        super().__init__(coords)
        if self.n > dense_limit:
            raise ValueError(f"dense field with n={self.n} exceeds dense_limit={dense_limit}")

    class Built:
        __slots__ = ("theta", "C", "lam", "U", "_chol")

        def __init__(self, theta, C):
            self.theta = theta
            self.C = C
            lam, U = np.linalg.eigh(C)
            self.lam = np.maximum(lam, 0.0)
            self.U = U
            self._chol = None

        @property
        def chol(self):
            if self._chol is None:
                self._chol, _ = cholesky_jitter(self.C, self.theta.sigma2)
            return self._chol

    def build(self, theta):
        return self.Built(theta, cov_matrix(self.coords, theta))

    def scaled(self, built, factor):
        return self.build(built.theta.with_sigma2(built.theta.sigma2 * factor))

    def logdensity(self, state, built) -> float:
        return mvn_logdensity_chol(state, built.chol)

    def conditional_mean(self, z, built) -> np.ndarray:
        """E[w | z] = C (C + I)^-1 z, through the eigendecomposition of C."""
        lam, U = built.lam, built.U
        return U @ (lam / (1.0 + lam) * (U.T @ z))

    def gibbs(self, state, z, built, rng):
        # joint draw: cov(w | z) = U diag(lam / (1 + lam)) U^T
        lam, U = built.lam, built.U
        shrink = lam / (1.0 + lam)
        return self.conditional_mean(z, built) + U @ (np.sqrt(shrink) * rng.standard_normal(self.n))

    def sample(self, built, rng):
        return built.U @ (np.sqrt(built.lam) * rng.standard_normal(self.n))

    def whiten(self, state, built) -> np.ndarray:
        return solve_triangular(built.chol, state, lower=True)

    def unwhiten(self, e, built) -> np.ndarray:
        return built.chol @ e


def make_field(kind: str, coords, spec):
    """Field of the given kind configured from a ModelSpec."""
    if kind == "nngp":
        return NNGPField(coords, spec.m)
    if kind == "rr":
        return RRField(coords, spec.a)
    if kind == "car":
        return CARField(coords, spec.alpha_car, spec.car_cutoff)
    if kind == "full":
        return DenseField(coords, spec.dense_limit)
    raise ValueError(f"unknown spatial kind {kind!r}")
