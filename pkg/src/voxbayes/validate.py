"""Fast self-checks against closed forms and brute-force oracles.

These are the quick (seconds) versions of the package's property tests,
runnable from an installed copy via ``voxbayes validate``.
"""

from __future__ import annotations

import time

import numpy as np
from scipy.special import ndtr

__all__ = ["run_checks", "CHECKS"]


def _random_points(rng, n):
    # distinct lattice points in [-1, 1]^2
    g = np.linspace(-1, 1, 41)
    flat = rng.choice(len(g) ** 2, size=n, replace=False)
    return np.column_stack([g[flat % len(g)], g[flat // len(g)]])


def check_matern_closed_forms(rng):
    from .covariance import matern_corr

    d = rng.uniform(0, 2, 1000)
    d[d == 0] = 1e-3
    phi = rng.uniform(0.05, 5, 1000)
    r05 = np.array([matern_corr(a, b, 0.5) for a, b in zip(d, phi)])
    r15 = np.array([matern_corr(a, b, 1.5) for a, b in zip(d, phi)])
    e05 = np.max(np.abs(r05 - np.exp(-np.sqrt(2) * d / phi)))
    x = np.sqrt(6) * d / phi
    e15 = np.max(np.abs(r15 - (1 + x) * np.exp(-x)))
    return max(e05, e15) <= 1e-10, f"max abs error {max(e05, e15):.2e}"


def check_nngp_exact(rng):
    from .covariance import MaternParams
    from .fullgp import gp_logdensity
    from .nngp import NNGPGeometry, nngp_logdensity

    worst = 0.0
    for _ in range(5):
        n = int(rng.integers(5, 60))
        S = _random_points(rng, n)
        th = MaternParams(rng.uniform(0.5, 5), rng.uniform(0.1, 1), rng.uniform(0.5, 2.5))
        w = rng.standard_normal(n)
        f = NNGPGeometry(S, n - 1).factors(th)
        worst = max(worst, abs(nngp_logdensity(w, f) - gp_logdensity(w, S, th)))
    return worst <= 1e-8, f"max |difference| {worst:.2e}"


def check_nngp_sparsity(rng):
    from .covariance import MaternParams
    from .nngp import NNGPGeometry, nngp_precision

    S = _random_points(rng, 300)
    out = []
    ok = True
    for m in (5, 10):
        P = nngp_precision(NNGPGeometry(S, m).factors(MaternParams(1, 0.5, 1.5)))
        off = P.nnz - np.count_nonzero(P.diagonal())
        ok &= off <= m * (m + 1) * 300 / 2
        out.append(f"m={m}: {off}")
    return ok, ", ".join(out)


def check_rr_domination(rng):
    from .covariance import MaternParams, cov_matrix
    from .reduced_rank import rr_cov, select_knots

    worst = 0.0
    for _ in range(5):
        n = int(rng.integers(20, 80))
        S = _random_points(rng, n)
        th = MaternParams(rng.uniform(0.5, 5), rng.uniform(0.1, 1), 1.5)
        C = cov_matrix(S, th)
        R = rr_cov(S, select_knots(S, 10), th)
        worst = min(worst, np.linalg.eigvalsh(C - R).min() / th.sigma2)
    return worst >= -1e-8, f"min eigenvalue / sigma2 {worst:.2e}"


def check_car(rng):
    from .car import car_precision, car_weights

    ok = True
    for alpha in (0.5, 0.9, 0.99):
        P = car_precision(car_weights(_random_points(rng, 30)), 2.0, alpha).P
        ok &= np.allclose(P, P.T, atol=0, rtol=0) and np.linalg.eigvalsh(P).min() > 0
    return bool(ok), "symmetric positive definite"


def check_roc(rng):
    from .metrics import auc_rank

    ok = True
    for _ in range(20):
        s = rng.integers(0, 10, 60).astype(float)
        y = rng.random(60) < 0.4
        y[:2] = [True, False]
        pos, neg = s[y], s[~y]
        brute = (np.sum(pos[:, None] > neg[None]) + 0.5 * np.sum(pos[:, None] == neg[None])) / (len(pos) * len(neg))
        ok &= auc_rank(s, y) == brute
    return bool(ok), "rank AUC equals pair count"


def check_base_prediction(rng):
    from scipy.stats import multivariate_normal

    from .chains import ChainSet, GlobalDraw
    from .config import ModelSpec
    from .data import VoxelImage
    from .predict import predict_image

    d = 2
    mu = rng.standard_normal((2, 2, d))
    A = rng.standard_normal((2, 2, d, d))
    gamma = A @ np.swapaxes(A, -1, -2) + np.eye(d)
    q0 = np.array([-0.8, 0.3])
    im = VoxelImage("v", [[0, 0], [1, 0], [0, 1], [1, 1]], [0, 1, 1, 0], rng.standard_normal((4, d)))
    spec = ModelSpec(variant="Base")
    ch = ChainSet.from_fixed(spec, GlobalDraw(mu, gamma, None, None, q0))
    p = predict_image(im, ch).probs
    ref = []
    for j in range(4):
        r = im.region[j]
        f1 = multivariate_normal(mu[1, r], gamma[1, r]).pdf(im.features[j])
        f0 = multivariate_normal(mu[0, r], gamma[0, r]).pdf(im.features[j])
        pr = ndtr(q0[r])
        ref.append(pr * f1 / (pr * f1 + (1 - pr) * f0))
    err = np.max(np.abs(p - ref))
    return err <= 1e-6, f"max abs error {err:.2e}"


def check_truncnorm(rng):
    from .sampler import sample_truncnorm

    x = sample_truncnorm(np.zeros(100000), np.ones(100000, bool), rng)
    far = sample_truncnorm(np.full(1000, 8.0), np.zeros(1000, bool), rng)
    ok = x.min() > 0 and abs(x.mean() - np.sqrt(2 / np.pi)) < 0.01 and np.all(np.isfinite(far)) and far.max() <= 0
    return bool(ok), f"half-normal mean {x.mean():.4f}"


CHECKS = {
    "matern_closed_forms": check_matern_closed_forms,
    "nngp_full_conditioning": check_nngp_exact,
    "nngp_sparsity": check_nngp_sparsity,
    "reduced_rank_domination": check_rr_domination,
    "car_validity": check_car,
    "roc_pair_count": check_roc,
    "base_prediction_closed_form": check_base_prediction,
    "truncated_normal": check_truncnorm,
}


def run_checks(seed: int = 0, names=None) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn(rng)
        except Exception as e:  # a crash is a failed check, reported not raised
            ok, detail = False, f"{type(e).__name__}: {e}"
        out.append({"check": name, "passed": bool(ok), "detail": detail, "seconds": time.perf_counter() - t0})
    return out

