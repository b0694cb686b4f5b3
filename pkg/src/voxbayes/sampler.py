"""Metropolis-within-Gibbs sampler for every model variant.

One sweep updates, in order, the probit latents kappa, the spatial fields w,
the Matérn/CAR parameters theta, the class-conditional Gaussians (mu, Gamma)
and, for SSE variants, the image shifts delta and their covariance Sigma.

theta gets block random-walk MH on the log scale.  Where the field can
integrate w out against kappa (NNGP), the block draws theta | kappa and then
w | theta, kappa jointly; otherwise theta moves with w held fixed.  A sigma2
rescaling move and a move at fixed whitened field follow.

Training labels are observed, so each image's feature sufficient statistics
per (class, region) stratum are fixed for the whole run.  Voxels with any
missing feature are left out of the (mu, Gamma, delta) updates but still
inform kappa and w through their labels.
"""

from __future__ import annotations

import json
import logging
import math
import tempfile
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import log_ndtr, ndtri, ndtri_exp
from scipy.stats import invwishart

from .chains import ChainSet, split_rhat
from .config import MCMCConfig, ModelSpec
from .covariance import CovarianceError
from .data import Dataset
from .fields import make_field
from .likelihood import draw_delta, draw_mvn_canonical, spd_inverse, stratum_stats

__all__ = [
    "SamplerError",
    "compute_q0",
    "sample_truncnorm",
    "image_rng",
    "MCMCState",
    "Sampler",
    "fit",
]

log = logging.getLogger(__name__)

REGION_NAMES = ("CG", "PZ")


class SamplerError(RuntimeError):
    def __init__(self, msg, dump_path: Optional[str] = None):
        super().__init__(msg if dump_path is None else f"{msg} (state dumped to {dump_path})")
        self.dump_path = dump_path


def compute_q0(train: Dataset) -> np.ndarray:
    """Probit of the labeled prevalence in each region, indexed (CG, PZ)."""
    q0 = np.empty(2)
    for r in (0, 1):
        tot = pos = 0
        for im in train:
            if im.labels is None:
                raise SamplerError(f"image {im.image_id} is unlabeled")
            sel = im.region == r
            tot += int(sel.sum())
            pos += int(im.labels[sel].sum())
        if tot == 0:
            raise SamplerError(f"region {REGION_NAMES[r]} has no labeled voxels; pool the regions or set q0 explicitly")
        if pos == 0 or pos == tot:
            raise SamplerError(
                f"region {REGION_NAMES[r]} has prevalence {pos / tot:g}; probit offset is undefined, "
                "pool the regions or set q0 explicitly"
            )
        q0[r] = ndtri(pos / tot)
    return q0


def sample_truncnorm(mean, positive, rng) -> np.ndarray:
    """N(mean, 1) truncated to (0, inf) where ``positive`` else (-inf, 0].

    Inverse CDF on the log scale: with u ~ U(0, 1], the positive branch is
    mean - Phi^-1(u Phi(mean)) and the negative branch is
    mean + Phi^-1(u Phi(-mean)).  Both stay finite for means far in the
    excluded tail because Phi is only ever handled through log_ndtr.
    """
    mean = np.asarray(mean, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    lu = np.log1p(-rng.random(mean.shape))  # log of a U(0, 1] draw
    s = np.where(positive, mean, -mean)
    x = ndtri_exp(lu + log_ndtr(s))
    out = np.where(positive, mean - x, mean + x)
    # rounding can land exactly on the wrong side of zero
    tiny = np.finfo(float).tiny
    return np.where(positive, np.maximum(out, tiny), np.minimum(out, 0.0))


def image_rng(seed: int, chain: int, image_id: str, purpose: int = 1) -> np.random.Generator:
    """Counter-based stream owned by one image; independent of scheduling."""
    key = zlib.crc32(str(image_id).encode())
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chain, purpose, key))))


def global_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chain, 0))))


def draw_iw(df, scale, rng) -> np.ndarray:
    d = scale.shape[0]
    out = np.atleast_2d(invwishart.rvs(df=df, scale=scale, random_state=rng)).reshape(d, d)
    return (out + out.T) / 2.0


@dataclass
class MCMCState:
    mu: np.ndarray  # (2, 2, d) indexed [c, r]
    gamma: np.ndarray  # (2, 2, d, d)
    Sigma: Optional[np.ndarray]
    delta: np.ndarray  # (N, d); zeros when SSE is off
    w: list  # per-image field state (knot values under RR)
    kappa: list
    theta: object
    q0: np.ndarray

    def to_json(self) -> dict:
        f = lambda a: None if a is None else np.asarray(a).tolist()  # noqa: E731
        th = self.theta
        if th is not None and not np.isscalar(th):
            th = [th.sigma2, th.phi, th.nu]
        return {
            "mu": f(self.mu),
            "gamma": f(self.gamma),
            "Sigma": f(self.Sigma),
            "delta": f(self.delta),
            "theta": th,
            "q0": f(self.q0),
            "w": [f(v) for v in self.w],
        }


class _Adapter:
    """Random-walk proposal on the log scale, tuned during burn-in only.

    The log step size follows a Robbins-Monro recursion toward the target
    acceptance; once enough history exists the proposal shape is the
    empirical covariance of the second half of the burn-in path.
    """

    def __init__(self, dim: int, target: float, init_sd: float = 0.1):
        self.dim = dim
        self.target = target
        self.log_scale = 0.0
        self.base = np.eye(dim) * init_sd**2
        self.chol = np.linalg.cholesky(self.base)
        self.shaped = False
        self.history: list = []
        self.batch_acc = 0
        self.batch_n = 0
        self.n_updates = 0
        self.acc = 0
        self.tot = 0

    def step(self, rng) -> np.ndarray:
        return math.exp(self.log_scale) * (self.chol @ rng.standard_normal(self.dim))

    def record(self, accepted: bool, x, adapting: bool):
        self.batch_acc += accepted
        self.batch_n += 1
        if adapting:
            self.history.append(np.array(x, dtype=float))
        else:
            self.acc += accepted
            self.tot += 1

    def adapt(self):
        if self.batch_n == 0:
            return
        self.n_updates += 1
        rate = self.batch_acc / self.batch_n
        self.log_scale += (rate - self.target) / math.sqrt(self.n_updates)
        self.batch_acc = self.batch_n = 0
        if self.dim > 1 and len(self.history) >= 200:
            H = np.array(self.history[len(self.history) // 2 :])
            emp = np.atleast_2d(np.cov(H.T))
            cov = (2.38**2 / self.dim) * emp + 1e-6 * np.eye(self.dim)
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                return
            if not self.shaped:
                # 2.38^2/dim is already the right scale for a Gaussian target
                self.log_scale, self.shaped = 0.0, True
            self.base, self.chol = cov, chol

    @property
    def rate(self) -> float:
        return self.acc / self.tot if self.tot else float("nan")


class _ImageData:
    __slots__ = ("image", "field", "q0v", "positive", "count", "ysum", "yy", "rng")

    def __init__(self, image, field, q0, rng):
        self.image = image
        self.field = field
        self.q0v = q0[image.region]
        self.rng = rng
        self.set_data(image)

    def set_data(self, image):
        self.image = image
        self.positive = image.labels.astype(bool)
        self.count, self.ysum, self.yy = stratum_stats(image.features, image.region, image.labels)


class Sampler:
    """State and update operators for one chain."""

    def __init__(
        self,
        train: Dataset,
        spec: ModelSpec,
        seed: int = 0,
        chain: int = 0,
        q0=None,
        threads: int = 1,
        fields: Optional[list] = None,
    ):
        images = sorted(train.images, key=lambda im: im.image_id)
        if not images:
            raise SamplerError("training set is empty")
        if any(im.labels is None for im in images):
            raise SamplerError("training images must be labeled")
        self.spec = spec
        self.seed = seed
        self.chain = chain
        self.threads = max(1, int(threads))
        self.d = train.d
        self.hyper = spec.hyperpriors
        if q0 is None:
            q0 = spec.q0 if spec.q0 is not None else compute_q0(train)
        self.q0 = np.asarray(q0, dtype=float)
        self.rng = global_rng(seed, chain)
        kind = spec.spatial
        if fields is None:
            fields = [make_field(kind, im.coords, spec) if kind else None for im in images]
        self.data = [_ImageData(im, f, self.q0, image_rng(seed, chain, im.image_id)) for im, f in zip(images, fields)]
        self.image_ids = [im.image_id for im in images]
        self.N = len(images)
        self._stack_stats()

        d = self.d
        self.theta_sampled = kind is not None and spec.theta_fixed is None
        self.collapsed = self.theta_sampled and spec.collapsed_move and all(hasattr(im.field, "marginal") for im in self.data)
        theta = None
        self.built = [None] * self.N
        if kind is not None:
            f0 = self.data[0].field
            if spec.theta_fixed is not None:
                theta = self._spec_theta(spec.theta_fixed, kind)
            else:
                theta = self._spec_theta(spec.theta_init, kind)
                # per-chain dispersion of the starting point
                lv = f0.theta_log(theta) + 0.3 * self.rng.standard_normal(f0.theta_dim)
                theta = f0.theta_from_log(self._clip_log(lv, f0))
            self.built = self._build_all(theta)
            self.theta_adapt = _Adapter(f0.theta_dim, spec.target_accept)
            self.scale_adapt = _Adapter(1, 0.3)
            self.white_adapt = _Adapter(f0.theta_dim, spec.target_accept)
        self.state = MCMCState(
            mu=np.zeros((2, 2, d)),
            gamma=np.broadcast_to(np.eye(d), (2, 2, d, d)).copy(),
            Sigma=np.eye(d) * self.hyper.sigma_scale if spec.sse else None,
            delta=np.zeros((self.N, d)),
            w=[None if im.field is None else im.field.zero_state() for im in self.data],
            kappa=[sample_truncnorm(im.q0v, im.positive, im.rng) for im in self.data],
            theta=theta,
            q0=self.q0,
        )
        self.gamma_inv = np.broadcast_to(np.eye(d), (2, 2, d, d)).copy()
        self.Sigma_inv = None if not spec.sse else np.eye(d) / self.hyper.sigma_scale
        self.iteration = 0
        self._empty_warned = set()

    # ------------------------------------------------------------- helpers

    @staticmethod
    def _spec_theta(tc, kind):
        return float(tc.sigma2) if kind == "car" else tc.matern()

    def _log_bounds(self, field):
        h = self.hyper
        bounds = [h.sigma2_bounds, h.phi_bounds, h.nu_bounds][: field.theta_dim]
        return np.log(np.array(bounds, dtype=float))

    def _clip_log(self, lv, field):
        b = self._log_bounds(field)
        eps = 1e-9
        return np.clip(lv, b[:, 0] + eps, b[:, 1] - eps)

    def _in_bounds(self, lv, field) -> bool:
        b = self._log_bounds(field)
        return bool(np.all(lv > b[:, 0]) and np.all(lv < b[:, 1]))

    def _map(self, fn, items):
        if self.threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=min(self.threads, len(items))) as ex:
                return list(ex.map(fn, items))
        return [fn(x) for x in items]

    def _build_all(self, theta):
        return self._map(lambda im: im.field.build(theta), self.data)

    def _stack_stats(self):
        self.counts = np.array([im.count for im in self.data])  # (N, 2, 2)
        self.ysums = np.array([im.ysum for im in self.data])  # (N, 2, 2, d)
        self.yys = np.array([im.yy for im in self.data])  # (N, 2, 2, d, d)

    def replace_data(self, images):
        """Swap labels/features of the training images (same ids and coordinates)."""
        lookup = {im.image_id: im for im in images}
        for im in self.data:
            new = lookup[im.image.image_id]
            if not np.array_equal(new.raw_coords, im.image.raw_coords) or not np.array_equal(new.region, im.image.region):
                raise SamplerError(f"{new.image_id}: replacement data must keep coordinates and regions")
            im.set_data(new)
        self._stack_stats()

    def _fail(self, msg):
        with tempfile.NamedTemporaryFile("w", suffix=".json", prefix="voxbayes-state-", delete=False) as fh:
            json.dump({"iteration": self.iteration, "error": msg, "state": self.state.to_json()}, fh)
        raise SamplerError(msg, fh.name)

    def field_values(self, k: int) -> np.ndarray:
        im = self.data[k]
        if im.field is None:
            return np.zeros(im.image.n)
        return im.field.values(self.state.w[k], self.built[k])

    # ------------------------------------------------------------- updates

    def update_kappa(self):
        st = self.state

        def one(k):
            im = self.data[k]
            return sample_truncnorm(im.q0v + self.field_values(k), im.positive, im.rng)

        st.kappa = self._map(one, list(range(self.N)))

    def update_w(self):
        st = self.state
        if self.spec.spatial is None:
            return

        def one(k):
            im = self.data[k]
            return im.field.gibbs(st.w[k], st.kappa[k] - im.q0v, self.built[k], im.rng)

        st.w = self._map(one, list(range(self.N)))

    def _kappa_loglik(self, k, built, w) -> float:
        im = self.data[k]
        r = self.state.kappa[k] - im.q0v - im.field.values(w, built)
        return -0.5 * float(r @ r)

    def _theta_target(self, built) -> float:
        st = self.state
        tot = 0.0
        for k, im in enumerate(self.data):
            tot += im.field.logdensity(st.w[k], built[k])
            if im.field.theta_in_likelihood:
                tot += self._kappa_loglik(k, built[k], st.w[k])
        return tot

    def update_theta(self, adapting: bool = False) -> bool:
        """Block random-walk MH on log theta; returns the acceptance flag.

        The main move is collapsed (w integrated out) where the field
        supports it, else centred (w fixed).  The optional scale and
        whitened moves follow.  The prior is uniform on the log scale and
        the proposals are symmetric there, so the log-scale Jacobian cancels
        and each ratio reduces to the target ratio.
        """
        if not self.theta_sampled:
            return False
        if self.collapsed:
            accepted = self._collapsed_move(adapting)
        else:
            accepted = self._centred_move(adapting)
        if self.spec.scale_move:
            self._scale_move(adapting)
        if self.spec.whitened_move:
            self._whitened_move(adapting)
        return accepted

    def _centred_move(self, adapting: bool) -> bool:
        st = self.state
        f0 = self.data[0].field
        ad = self.theta_adapt
        cur = f0.theta_log(st.theta)
        prop = cur + ad.step(self.rng)
        accepted = False
        if self._in_bounds(prop, f0):
            theta_new = f0.theta_from_log(prop)
            try:
                built_new = self._build_all(theta_new)
            except CovarianceError:
                built_new = None
            if built_new is not None:
                logr = self._theta_target(built_new) - self._theta_target(self.built)
                if math.log(self.rng.random()) < logr:
                    st.theta, self.built, accepted = theta_new, built_new, True
        ad.record(accepted, f0.theta_log(st.theta), adapting)
        return accepted

    def _marginals(self, built):
        st = self.state
        return self._map(lambda k: self.data[k].field.marginal(st.kappa[k] - self.data[k].q0v, built[k]), list(range(self.N)))

    def _collapsed_move(self, adapting: bool) -> bool:
        """MH on log theta against p(theta | kappa) with w integrated out,
        followed by a joint draw of w from its full conditional.

        Together the two steps draw (theta, w) as one block given kappa, so
        theta is not tied to the current w.
        """
        st = self.state
        f0 = self.data[0].field
        ad = self.theta_adapt
        cur = f0.theta_log(st.theta)
        marg = self._marginals(self.built)
        prop = cur + ad.step(self.rng)
        accepted = False
        if self._in_bounds(prop, f0):
            theta_new = f0.theta_from_log(prop)
            try:
                built_new = self._build_all(theta_new)
            except CovarianceError:
                built_new = None
            if built_new is not None:
                marg_new = self._marginals(built_new)
                logr = sum(m[0] for m in marg_new) - sum(m[0] for m in marg)
                if math.log(self.rng.random()) < logr:
                    st.theta, self.built, marg, accepted = theta_new, built_new, marg_new, True
        ad.record(accepted, f0.theta_log(st.theta), adapting)
        if any(m[1] is None for m in marg):
            self._fail("P + I is not positive definite at the current theta")
        st.w = self._map(lambda k: self.data[k].field.conditional_draw(self.built[k], marg[k][1], self.data[k].rng), list(range(self.N)))
        return accepted

    def _scale_move(self, adapting: bool):
        """Rescale sigma2 by f and every field state by sqrt(f) jointly.

        The prior of w is a scale family in sigma2, so the prior ratio and
        the Jacobian cancel and only the kappa likelihood remains.
        """
        st = self.state
        f0 = self.data[0].field
        ad = self.scale_adapt
        eps = float(ad.step(self.rng)[0])
        lv = f0.theta_log(st.theta).copy()
        lv[0] += eps
        accepted = False
        if self._in_bounds(lv, f0):
            fac = math.exp(eps)
            root = math.sqrt(fac)
            logr = 0.0
            new_w = [w * root for w in st.w]
            new_built = [im.field.scaled(b, fac) for im, b in zip(self.data, self.built)]
            for k in range(self.N):
                logr += self._kappa_loglik(k, new_built[k], new_w[k]) - self._kappa_loglik(k, self.built[k], st.w[k])
            if math.log(self.rng.random()) < logr:
                st.w, self.built = new_w, new_built
                st.theta = f0.rescale_theta(st.theta, fac)
                accepted = True
        ad.record(accepted, [lv[0]], adapting)

    def _label_loglik(self, k, w, built) -> float:
        im = self.data[k]
        q = im.q0v + im.field.values(w, built)
        return float(np.sum(log_ndtr(np.where(im.positive, q, -q))))

    def _whitened_move(self, adapting: bool):
        """Block MH on log theta at fixed innovations, with kappa integrated out.

        Given w, theta is pinned down tightly by the field prior, so the
        update above moves slowly.  Here the state is carried as
        w = unwhiten(e, theta) with e fixed; the prior of e does not involve
        theta and the target is the probit likelihood of the labels.  kappa
        is stale afterwards and is redrawn at the start of the next sweep,
        before anything conditions on it.
        """
        st = self.state
        f0 = self.data[0].field
        ad = self.white_adapt
        cur = f0.theta_log(st.theta)
        prop = cur + ad.step(self.rng)
        accepted = False
        if self._in_bounds(prop, f0):
            theta_new = f0.theta_from_log(prop)
            try:
                built_new = self._build_all(theta_new)
            except CovarianceError:
                built_new = None
            if built_new is not None:
                e = [im.field.whiten(w, b) for im, w, b in zip(self.data, st.w, self.built)]
                w_new = [im.field.unwhiten(ek, b) for im, ek, b in zip(self.data, e, built_new)]
                logr = sum(
                    self._label_loglik(k, w_new[k], built_new[k]) - self._label_loglik(k, st.w[k], self.built[k])
                    for k in range(self.N)
                )
                if math.log(self.rng.random()) < logr:
                    st.theta, st.w, self.built, accepted = theta_new, w_new, built_new, True
        ad.record(accepted, f0.theta_log(st.theta), adapting)

    def _residual_stats(self):
        """Per-stratum count, residual sum and residual scatter (about 0) after removing delta."""
        delta = self.state.delta
        n = self.counts.sum(axis=0)
        s = self.ysums.sum(axis=0) - np.einsum("ncr,nd->crd", self.counts, delta)
        yd = np.einsum("ncrd,ne->crde", self.ysums, delta)
        dd = np.einsum("ncr,nd,ne->crde", self.counts, delta, delta)
        S = self.yys.sum(axis=0) - yd - np.swapaxes(yd, -1, -2) + dd
        return n, s, S

    def update_mu_gamma(self):
        st = self.state
        h = self.hyper
        d = self.d
        n, s, S = self._residual_stats()
        df0 = h.df_gamma(d)
        psi0 = h.gamma_scale * np.eye(d)
        for c in (0, 1):
            for r in (0, 1):
                nk = n[c, r]
                if nk == 0 and (c, r) not in self._empty_warned:
                    log.warning("stratum c=%d r=%s has no complete training voxels; drawing from the prior", c, REGION_NAMES[r])
                    self._empty_warned.add((c, r))
                Gi = self.gamma_inv[c, r]
                Q = np.eye(d) / h.mu_var + nk * Gi
                mu = draw_mvn_canonical(Q, Gi @ s[c, r], self.rng)
                scatter = S[c, r] - np.outer(mu, s[c, r]) - np.outer(s[c, r], mu) + nk * np.outer(mu, mu)
                G = draw_iw(df0 + nk, psi0 + (scatter + scatter.T) / 2.0, self.rng)
                try:
                    Ginv = spd_inverse(G)
                except np.linalg.LinAlgError:
                    self._fail(f"Gamma[{c}][{r}] is not positive definite")
                st.mu[c, r], st.gamma[c, r], self.gamma_inv[c, r] = mu, G, Ginv

    def update_delta_Sigma(self):
        if not self.spec.sse:
            return
        st = self.state
        h = self.hyper
        d = self.d

        def one(k):
            im = self.data[k]
            return draw_delta(im.count, im.ysum, st.mu, self.gamma_inv, self.Sigma_inv, im.rng)

        st.delta = np.array(self._map(one, list(range(self.N))))
        self._shift_move()
        scatter = st.delta.T @ st.delta
        Sig = draw_iw(h.df_sigma(d) + self.N, h.sigma_scale * np.eye(d) + scatter, self.rng)
        try:
            Sinv = spd_inverse(Sig)
        except np.linalg.LinAlgError:
            self._fail("Sigma is not positive definite")
        st.Sigma, self.Sigma_inv = Sig, Sinv

    def _shift_move(self):
        """Joint translation mu[c, r] + v, delta_i - v drawn from its full conditional.

        The likelihood sees only mu + delta, so the ridge along v is set by
        the priors alone and the alternating mu/delta draws cross it slowly.
        Translations have unit Jacobian and the conditional of v is Gaussian.
        """
        st = self.state
        mv = self.hyper.mu_var
        Q = (4.0 / mv) * np.eye(self.d) + self.N * self.Sigma_inv
        b = -st.mu.sum(axis=(0, 1)) / mv + self.Sigma_inv @ st.delta.sum(axis=0)
        v = draw_mvn_canonical(Q, b, self.rng)
        st.mu = st.mu + v
        st.delta = st.delta - v

    def sweep(self, adapting: bool = False):
        self.update_kappa()
        self.update_w()
        self.update_theta(adapting)
        self.update_mu_gamma()
        self.update_delta_Sigma()
        self.iteration += 1

    def adapt(self):
        if self.theta_sampled:
            self.theta_adapt.adapt()
            if self.spec.scale_move:
                self.scale_adapt.adapt()
            if self.spec.whitened_move:
                self.white_adapt.adapt()

    def theta_vector(self) -> Optional[np.ndarray]:
        th = self.state.theta
        if th is None:
            return None
        if np.isscalar(th):
            return np.array([th], dtype=float)
        return np.array([th.sigma2, th.phi, th.nu])


def fit(train: Dataset, spec: ModelSpec, mcmc: MCMCConfig = MCMCConfig(), q0=None, keep_delta: bool = True) -> ChainSet:
    """Run ``mcmc.chains`` chains and return the thinned post-burn-in draws."""
    if mcmc.iters < mcmc.thin:
        raise SamplerError(f"iters={mcmc.iters} is smaller than thin={mcmc.thin}; no draws would be kept")
    if q0 is None:
        q0 = spec.q0 if spec.q0 is not None else compute_q0(train)
    q0 = np.asarray(q0, dtype=float)
    S = mcmc.iters // mcmc.thin
    C = mcmc.chains
    d = train.d
    N = len(train)
    mu = np.empty((C, S, 2, 2, d))
    gamma = np.empty((C, S, 2, 2, d, d))
    Sigma = np.empty((C, S, d, d)) if spec.sse else None
    delta = np.empty((C, S, N, d)) if (spec.sse and keep_delta) else None
    theta = None
    acc = {}
    fields = None
    t0 = time.perf_counter()
    total = mcmc.burnin + mcmc.iters
    for c in range(C):
        smp = Sampler(train, spec, seed=mcmc.seed, chain=c, q0=q0, threads=mcmc.threads, fields=fields)
        fields = [im.field for im in smp.data]  # geometry is theta-free; reuse across chains
        if spec.spatial is not None and theta is None:
            theta = np.empty((C, S, len(smp.theta_vector())))
        k = 0
        for it in range(total):
            adapting = it < mcmc.burnin
            smp.sweep(adapting)
            if adapting and (it + 1) % mcmc.adapt_every == 0:
                smp.adapt()
            if not adapting and (it - mcmc.burnin) % mcmc.thin == mcmc.thin - 1:
                st = smp.state
                mu[c, k], gamma[c, k] = st.mu, st.gamma
                if Sigma is not None:
                    Sigma[c, k] = st.Sigma
                if delta is not None:
                    delta[c, k] = st.delta
                if theta is not None:
                    theta[c, k] = smp.theta_vector()
                k += 1
            if (it + 1) % max(1, total // 10) == 0:
                log.info("%s chain %d: %d/%d iterations (%.1fs)", spec.name, c, it + 1, total, time.perf_counter() - t0)
        if smp.theta_sampled:
            acc[f"chain{c}"] = {"theta": smp.theta_adapt.rate}
            if spec.scale_move:
                acc[f"chain{c}"]["sigma2_scale"] = smp.scale_adapt.rate
            if spec.whitened_move:
                acc[f"chain{c}"]["theta_whitened"] = smp.white_adapt.rate
    chains = ChainSet(
        spec=spec,
        q0=q0,
        image_ids=sorted(im.image_id for im in train),
        feature_names=list(train.feature_names),
        mu=mu,
        gamma=gamma,
        Sigma=Sigma,
        theta=theta,
        delta=delta,
        mcmc=mcmc,
        acceptance=acc,
        meta={"runtime_s": time.perf_counter() - t0, "seed": mcmc.seed},
    )
    rh = chains.rhat()
    chains.meta["rhat"] = {k: (None if math.isnan(v) else v) for k, v in rh.items()}
    bad = [k for k, v in rh.items() if v > 1.1]
    if bad:
        log.warning("split R-hat above 1.1 for %s", ", ".join(bad[:8]))
    return chains


__all__ += ["split_rhat"]
