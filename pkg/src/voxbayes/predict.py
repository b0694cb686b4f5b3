"""Posterior predictive classification of unlabeled images.

For every retained draw of the global parameters the test image's latents
(c*, kappa*, w*, delta*) are updated by a short inner Gibbs run, warm-started
from the previous draw.  The reported probability is the Rao-Blackwellized
average of P(c*_j = 1 | w*, delta*, y*) over the kept inner sweeps, which has
the same expectation as averaging sampled labels but less noise.  Without
spatial field and SSE the probability is available in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit, log_ndtr

from .chains import ChainSet
from .config import ModelSpec
from .data import VoxelImage
from .fields import make_field
from .likelihood import draw_delta, feature_loglik, spd_inverse, stratum_stats
from .sampler import image_rng, sample_truncnorm

__all__ = ["PredictionResult", "predict_image", "predict_dataset", "smooth_probs", "class_posterior"]


@dataclass(frozen=True, eq=False)
class PredictionResult:
    image_id: str
    probs: np.ndarray
    n_draws: int
    smoothed: bool = False

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if not np.all(np.isfinite(p)) or p.min(initial=0.0) < 0 or p.max(initial=0.0) > 1:
            raise ValueError(f"{self.image_id}: probabilities must be finite and in [0, 1]")


def class_posterior(ll, q) -> np.ndarray:
    """P(c = 1) for voxels with probit mean q and feature log-likelihoods ll (n, 2)."""
    return expit(log_ndtr(q) + ll[:, 1] - log_ndtr(-q) - ll[:, 0])


def predict_image(
    test: VoxelImage,
    chains: ChainSet,
    spec: Optional[ModelSpec] = None,
    seed: int = 0,
    max_draws: Optional[int] = None,
    field=None,
) -> PredictionResult:
    """Posterior predictive cancer probabilities for one image.

    Labels on ``test``, if any, are ignored.
    """
    spec = chains.spec if spec is None else spec
    if test.d != chains.d:
        raise ValueError(f"{test.image_id}: image has d={test.d}, chains have d={chains.d}")
    y, region = test.features, test.region
    kind = spec.spatial
    if kind is not None and field is None:
        field = make_field(kind, test.coords, spec)
    rng = image_rng(seed, 0, test.image_id, purpose=2)

    acc = np.zeros(test.n)
    used = 0
    count = 0
    w = None if field is None else field.zero_state()
    delta = np.zeros(test.d)
    built = None
    last_theta = None
    for g in chains.draws(max_draws):
        used += 1
        q0v = np.asarray(g.q0)[region]
        if kind is None and not spec.sse:
            acc += class_posterior(feature_loglik(y, region, g.mu, g.gamma), q0v)
            count += 1
            continue
        if kind is not None and (built is None or g.theta != last_theta):
            built = field.build(g.theta)
            last_theta = g.theta
        gamma_inv = np.array([[spd_inverse(g.gamma[c, r]) for r in (0, 1)] for c in (0, 1)])
        Sigma_inv = spd_inverse(g.Sigma) if spec.sse else None
        for sweep in range(spec.inner_sweeps):
            wv = 0.0 if field is None else field.values(w, built)
            q = q0v + wv
            p1 = class_posterior(feature_loglik(y, region, g.mu, g.gamma, delta if spec.sse else None), q)
            if sweep >= spec.inner_burn:
                acc += p1
                count += 1
            c = rng.random(test.n) < p1
            if field is not None:
                kappa = sample_truncnorm(q, c, rng)
                w = field.gibbs(w, kappa - q0v, built, rng)
            if spec.sse:
                cnt, ysum, _ = stratum_stats(y, region, c.astype(np.int8))
                delta = draw_delta(cnt, ysum, g.mu, gamma_inv, Sigma_inv, rng)
    if count == 0:
        raise ValueError("chain set holds no draws")
    probs = np.clip(acc / count, 0.0, 1.0)
    if spec.smooth:
        probs = smooth_probs(probs, test.coords, spec.smoothing_bandwidth)
    return PredictionResult(test.image_id, probs, used, smoothed=spec.smooth)


def predict_dataset(test, chains: ChainSet, spec=None, seed: int = 0, max_draws=None, threads: int = 1) -> list:
    items = list(test)
    if threads > 1 and len(items) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=min(threads, len(items))) as ex:
            return list(ex.map(lambda im: predict_image(im, chains, spec, seed, max_draws), items))
    return [predict_image(im, chains, spec, seed, max_draws) for im in items]


def smooth_probs(result, S, bandwidth: float):
    """Gaussian-kernel average of probabilities within one image.

    Accepts a PredictionResult (returns one) or a plain array.
    """
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    p = np.asarray(result.probs if isinstance(result, PredictionResult) else result, dtype=float)
    S = np.asarray(S, dtype=float)
    d2 = np.sum((S[:, None, :] - S[None, :, :]) ** 2, axis=-1)
    # shift by the row minimum so the nearest point keeps weight 1 as h -> 0
    logk = -0.5 * d2 / bandwidth**2
    logk -= logk.max(axis=1, keepdims=True)
    K = np.exp(logk)
    out = np.clip((K @ p) / K.sum(axis=1), 0.0, 1.0)
    if isinstance(result, PredictionResult):
        return PredictionResult(result.image_id, out, result.n_draws, smoothed=True)
    return out
