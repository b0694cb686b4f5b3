"""Acceptance criteria 1-11.

Each test reports one PASS/FAIL line (also collected into the terminal
summary) and then asserts.  Criteria 7-9 and 11 are long calibration runs
marked ``slow``; deselect them with ``-m "not slow"``.
"""

import itertools
import math
import time

import numpy as np
import pytest
from scipy.special import log_ndtr, ndtr
from scipy.stats import invwishart, ks_2samp, multivariate_normal

from voxbayes.car import car_precision, car_weights
from voxbayes.chains import ChainSet, GlobalDraw
from voxbayes.config import HyperPriors, MCMCConfig, ModelSpec, SimScenario, ThetaConfig
from voxbayes.covariance import MaternParams, cov_matrix, matern_corr
from voxbayes.data import Dataset, VoxelImage
from voxbayes.fullgp import gp_logdensity
from voxbayes.metrics import auc_rank, sensitivity_at
from voxbayes.nngp import NNGPGeometry, build_neighbors, nngp_factors, nngp_logdensity, nngp_precision, nngp_sample
from voxbayes.predict import predict_image
from voxbayes.reduced_rank import rr_cov, select_knots
from voxbayes.sampler import Sampler, fit
from voxbayes.simulate import run_scenario, simulate_dataset

from _util import grid, lattice_points, spd
from conftest import ACCEPTANCE_LINES


def report(num, name, ok, detail, runtime, budget):
    ok = bool(ok) and runtime <= budget
    line = f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail} ({runtime:.1f}s, budget {budget:g}s)"
    print(line)
    ACCEPTANCE_LINES.append((num, line))
    assert ok, line


# ------------------------------------------------------------------ 1-5


def test_c01_matern_closed_forms():
    t = time.perf_counter()
    rng = np.random.default_rng(1)
    d = 2.0 - rng.uniform(0.0, 2.0, 1000)  # (0, 2]
    phi = rng.uniform(0.05, 5.0, 1000)
    r05 = np.array([matern_corr(a, b, 0.5) for a, b in zip(d, phi)])
    r15 = np.array([matern_corr(a, b, 1.5) for a, b in zip(d, phi)])
    x = math.sqrt(6) * d / phi
    err = max(np.max(np.abs(r05 - np.exp(-math.sqrt(2) * d / phi))), np.max(np.abs(r15 - (1 + x) * np.exp(-x))))
    report(1, "Matern closed forms", err <= 1e-10, f"max abs error {err:.1e}", time.perf_counter() - t, 1)


def test_c02_nngp_full_conditioning_exact():
    t = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 201))
        S = lattice_points(rng, n)
        th = MaternParams(rng.uniform(0.5, 10), rng.uniform(0.05, 1.5), rng.uniform(0.5, 2.5))
        w = np.linalg.cholesky(cov_matrix(S, th) + 1e-10 * np.eye(n)) @ rng.standard_normal(n)
        lp = nngp_logdensity(w, NNGPGeometry(S, n - 1).factors(th))
        worst = max(worst, abs(lp - gp_logdensity(w, S, th)))
    report(2, "NNGP exactness at m=n-1", worst <= 1e-8, f"max |difference| {worst:.1e}", time.perf_counter() - t, 30)


def test_c03_nngp_sparsity():
    t = time.perf_counter()
    rng = np.random.default_rng(3)
    S = lattice_points(rng, 500, size=41)
    ok, parts = True, []
    for m in (5, 10, 15):
        P = nngp_precision(NNGPGeometry(S, m).factors(MaternParams(1.0, 0.3, 1.5)))
        off = P.nnz - np.count_nonzero(P.diagonal())
        bound = m * (m + 1) * 500 // 2
        ok &= off <= bound
        parts.append(f"m={m} {off}/{bound}")
    report(3, "NNGP sparsity", ok, ", ".join(parts), time.perf_counter() - t, 10)


def test_c04_reduced_rank_domination():
    t = time.perf_counter()
    rng = np.random.default_rng(4)
    min_eig, knot_err, full_err = np.inf, 0.0, 0.0
    for _ in range(20):
        n = int(rng.integers(30, 201))
        S = lattice_points(rng, n)
        th = MaternParams(rng.uniform(0.5, 10), rng.uniform(0.05, 1.5), rng.uniform(0.5, 2.5))
        C = cov_matrix(S, th)
        for a in (5, 10, 25):
            k = select_knots(S, a)
            R = rr_cov(S, k, th)
            min_eig = min(min_eig, np.linalg.eigvalsh(C - R).min() / th.sigma2)
            knot_err = max(knot_err, np.max(np.abs(R[np.ix_(k, k)] - C[np.ix_(k, k)])))
    for _ in range(3):
        n = int(rng.integers(10, 60))
        S = lattice_points(rng, n)
        th = MaternParams(rng.uniform(0.5, 5), rng.uniform(0.1, 1.0), rng.uniform(0.5, 2.5))
        full_err = max(full_err, np.max(np.abs(rr_cov(S, select_knots(S, n), th) - cov_matrix(S, th))))
    ok = min_eig >= -1e-8 and knot_err <= 1e-10 and full_err <= 1e-8
    detail = f"min eig/sigma2 {min_eig:.1e}, knot error {knot_err:.1e}, a=n error {full_err:.1e}"
    report(4, "reduced-rank domination", ok, detail, time.perf_counter() - t, 60)


def test_c05_car_validity():
    t = time.perf_counter()
    rng = np.random.default_rng(5)
    ok = True
    for alpha in (0.5, 0.9, 0.99):
        for _ in range(20):
            S = lattice_points(rng, int(rng.integers(2, 80)))
            P = car_precision(car_weights(S), rng.uniform(0.1, 10), alpha).P
            ok &= np.array_equal(P, P.T) and np.linalg.eigvalsh(P).min() > 0
    worst = 0.0
    for _ in range(20):
        S = lattice_points(rng, 4)
        wts = car_weights(S)
        s2, alpha = rng.uniform(0.5, 3), rng.choice([0.5, 0.9, 0.99])
        P = car_precision(wts, s2, alpha).P
        w = rng.standard_normal(4)
        for j in range(4):
            mean_p = -(P[j] @ w - P[j, j] * w[j]) / P[j, j]
            worst = max(worst, abs(mean_p - alpha * (wts.b[j] @ w)), abs(1 / P[j, j] - s2 / wts.D[j]))
    report(5, "CAR validity", ok and worst <= 1e-10, f"PD and symmetric: {bool(ok)}, conditional moments {worst:.1e}", time.perf_counter() - t, 10)


# ------------------------------------------------------------------ 6


def _bayes_rule(im, g):
    out = np.empty(im.n)
    for j in range(im.n):
        r = im.region[j]
        f = [multivariate_normal(g.mu[c, r], g.gamma[c, r]).pdf(im.features[j]) for c in (0, 1)]
        p = ndtr(g.q0[r])
        out[j] = p * f[1] / (p * f[1] + (1 - p) * f[0])
    return out


def _enumerate_fullgp(im, g, th, rng, n_mc=10**6):
    """P(c_j = 1 | y) summing over all 2^n label vectors; w integrated by Monte Carlo."""
    C = cov_matrix(im.coords, th)
    w = rng.multivariate_normal(np.zeros(im.n), C, size=n_mc)
    q = g.q0[im.region] + w
    lpos, lneg = log_ndtr(q), log_ndtr(-q)
    ll = np.array([[multivariate_normal(g.mu[c, r], g.gamma[c, r]).logpdf(y) for c in (0, 1)] for y, r in zip(im.features, im.region)])
    configs = np.array(list(itertools.product((0, 1), repeat=im.n)), bool)
    logp = np.empty(len(configs))
    for k, c in enumerate(configs):
        lw = np.where(c, lpos, lneg).sum(axis=1)
        top = lw.max()
        logp[k] = top + math.log(np.mean(np.exp(lw - top))) + ll[np.arange(im.n), c.astype(int)].sum()
    p = np.exp(logp - logp.max())
    p /= p.sum()
    return configs.T.astype(float) @ p


def test_c06_prediction_oracles():
    t = time.perf_counter()
    rng = np.random.default_rng(6)
    base_err, gp_err = 0.0, 0.0
    for _ in range(10):
        g = GlobalDraw(rng.standard_normal((2, 2, 3)), np.array([[spd(rng, 3) for _ in range(2)] for _ in range(2)]), None, None, rng.normal(0, 0.5, 2))
        im = VoxelImage("b", grid(2, 2), [0, 1, 1, 0], 2 * rng.standard_normal((4, 3)))
        p = predict_image(im, ChainSet.from_fixed(ModelSpec(variant="Base"), g)).probs
        base_err = max(base_err, np.max(np.abs(p - _bayes_rule(im, g))))
    for k in range(3):
        th = MaternParams(rng.uniform(1, 4), rng.uniform(0.5, 2), 1.5)
        g = GlobalDraw(0.6 * rng.standard_normal((2, 2, 2)), np.array([[spd(rng, 2) for _ in range(2)] for _ in range(2)]), None, th, rng.normal(0, 0.5, 2))
        im = VoxelImage(f"g{k}", grid(2, 2), [0, 1, 1, 0], rng.standard_normal((4, 2)))
        spec = ModelSpec(variant="FullGP", theta_fixed=ThetaConfig(sigma2=th.sigma2, phi=th.phi, nu=th.nu))
        p = predict_image(im, ChainSet.from_fixed(spec, g, n_draws=4000), seed=k).probs
        gp_err = max(gp_err, np.max(np.abs(p - _enumerate_fullgp(im, g, th, rng))))
    ok = base_err <= 1e-6 and gp_err <= 0.02
    report(6, "prediction oracles", ok, f"Base closed form {base_err:.1e}, FullGP enumeration {gp_err:.4f}", time.perf_counter() - t, 600)


# ------------------------------------------------------------------ 7-9


@pytest.mark.slow
def test_c07_parameter_recovery():
    t = time.perf_counter()
    truth = np.log([5.0, 0.5])
    sc = SimScenario(sigma2=5.0, phi=0.5, nu=1.5)
    spec = ModelSpec.from_name("M-sse-nngp")
    covered = []
    for rep in range(10):
        train = simulate_dataset(sc, 10, np.random.SeedSequence(7, spawn_key=(rep,)), "train")
        ch = fit(train, spec, MCMCConfig(chains=2, iters=2000, burnin=1000, thin=5, seed=rep))
        lt = np.log(ch.theta.reshape(-1, 3)[:, :2])
        lo, hi = np.quantile(lt, [0.05, 0.95], axis=0)
        covered.append(bool(np.all((lo <= truth) & (truth <= hi))))
    n = sum(covered)
    report(7, "parameter recovery", n >= 8, f"(log sigma2, log phi) covered in {n}/10 repeats", time.perf_counter() - t, 7200)


SCENARIO_MCMC = MCMCConfig(chains=2, iters=1000, burnin=500, thin=5)


@pytest.mark.slow
def test_c08_spatial_ordering():
    t = time.perf_counter()
    sc = SimScenario(sigma2=20.0, phi=0.5, nu=1.5, n_train=10, n_test=5)
    specs = [ModelSpec.from_name(s) for s in ("M-sse-nngp", "M-sse", "M-base")]
    res = run_scenario(sc, 10, specs, None, SCENARIO_MCMC, seed=8)["summary"]
    a = {k: v["mean"] for k, v in res.items()}
    ok = a["M-sse-nngp"] > a["M-sse"] > a["M-base"] and a["M-sse-nngp"] - a["M-base"] >= 0.05
    ok &= all(v["n"] == 10 for v in res.values())
    detail = ", ".join(f"{k} {v:.3f}" for k, v in a.items())
    report(8, "spatial ordering", ok, detail, time.perf_counter() - t, 6 * 3600)


@pytest.mark.slow
def test_c09_reduced_rank_local_correlation():
    t = time.perf_counter()
    sc = SimScenario(sigma2=1.0, phi=0.1, nu=1.5, n_train=10, n_test=5)
    specs = [ModelSpec.from_name(s) for s in ("M-sse-rr", "M-sse-nngp")]
    res = run_scenario(sc, 10, specs, None, SCENARIO_MCMC, seed=9)["summary"]
    a = {k: v["mean"] for k, v in res.items()}
    ok = a["M-sse-rr"] < a["M-sse-nngp"] and all(v["n"] == 10 for v in res.values())
    report(9, "reduced rank under local correlation", ok, f"M-sse-rr {a['M-sse-rr']:.3f}, M-sse-nngp {a['M-sse-nngp']:.3f}", time.perf_counter() - t, 6 * 3600)


# ------------------------------------------------------------------ 10


def _pair_count_auc(s, y):
    pos, neg = s[y], s[~y]
    return (np.sum(pos[:, None] > neg[None, :]) + 0.5 * np.sum(pos[:, None] == neg[None, :])) / (len(pos) * len(neg))


def test_c10_metric_oracles():
    t = time.perf_counter()
    rng = np.random.default_rng(10)
    exact = 0
    for k in range(100):
        n = int(rng.integers(2, 300))
        s = rng.integers(0, 10, n).astype(float) if k % 2 else rng.random(n)
        y = rng.random(n) < rng.uniform(0.1, 0.9)
        y[:2] = [True, False]
        exact += auc_rank(s, y) == _pair_count_auc(s, y)
    fpr = np.array([0.0, 0.1, 0.25, 0.5, 1.0])
    tpr = np.array([0.0, 0.3, 0.6, 0.9, 1.0])
    s80_err = abs(sensitivity_at(fpr, tpr, 0.2) - (0.3 + 0.3 * 0.1 / 0.15))
    ok = exact == 100 and s80_err <= 1e-12
    report(10, "metric oracles", ok, f"AUC exact on {exact}/100, S80 error {s80_err:.1e}", time.perf_counter() - t, 5)


# ------------------------------------------------------------------ 11

GW_D, GW_M = 2, 5
GW_Q0 = np.array([-0.3, 0.4])
GW_HP = HyperPriors(mu_var=1.0, sigma2_bounds=(0.5, 2.0), phi_bounds=(0.2, 0.8), nu_bounds=(0.5, 2.0))
GW_RAW = grid(5, 4)
GW_REGION = (GW_RAW[:, 1] >= 2).astype(int)
GW_IDS = ("g0", "g1")
N_FORWARD = 4000
GW_BURN, GW_SWEEPS, GW_THIN = 500, 40000, 20
GW_NAMES = (
    ["log_sigma2", "log_phi", "log_nu"]
    + [f"mu[{c}{r}]" for c in (0, 1) for r in (0, 1)]
    + [f"log_gamma[{c}{r}]" for c in (0, 1) for r in (0, 1)]
    + ["log_Sigma00", "Sigma01", "delta00"]
)


def _gw_images(rng, mu, gamma, delta, fields):
    # labels marginally over kappa: the whitened theta move leaves kappa stale
    ims = []
    for k, f in enumerate(fields):
        lab = (rng.random(len(f)) < ndtr(GW_Q0[GW_REGION] + f)).astype(int)
        y = np.array([rng.multivariate_normal(mu[c, r] + delta[k], gamma[c, r]) for c, r in zip(lab, GW_REGION)])
        ims.append(VoxelImage(GW_IDS[k], GW_RAW, GW_REGION, y, lab))
    return Dataset(tuple(ims), ("a", "b"))


def _gw_prior(rng, graph, coords):
    lo, hi = np.log(np.array([GW_HP.sigma2_bounds, GW_HP.phi_bounds, GW_HP.nu_bounds])).T
    th = MaternParams(*np.exp(rng.uniform(lo, hi)))
    I = np.eye(GW_D)
    mu = rng.standard_normal((2, 2, GW_D)) * math.sqrt(GW_HP.mu_var)
    gamma = np.array([[invwishart.rvs(GW_D + 2, I, random_state=rng) for _ in range(2)] for _ in range(2)])
    Sigma = invwishart.rvs(GW_D + 2, I, random_state=rng)
    delta = rng.multivariate_normal(np.zeros(GW_D), Sigma, size=2)
    w = [nngp_sample(nngp_factors(graph, coords, th), rng) for _ in GW_IDS]
    return th, mu, gamma, Sigma, delta, w


def _gw_scalars(th, mu, gamma, Sigma, delta):
    return np.r_[np.log([th.sigma2, th.phi, th.nu]), mu[..., 0].ravel(), np.log(gamma[..., 0, 0]).ravel(), math.log(Sigma[0, 0]), Sigma[0, 1], delta[0, 0]]


@pytest.mark.slow
def test_c11_geweke_joint_distribution():
    t = time.perf_counter()
    rng = np.random.default_rng(11)
    spec = ModelSpec(
        variant="NNGP+SSE", m=GW_M, q0=tuple(GW_Q0), hyperpriors=GW_HP, theta_init=ThetaConfig(sigma2=1.0, phi=0.4, nu=1.0)
    )
    coords = VoxelImage("x", GW_RAW, GW_REGION, np.zeros((len(GW_RAW), GW_D))).coords
    graph = build_neighbors(coords, GW_M)
    forward = np.array([_gw_scalars(*_gw_prior(rng, graph, coords)[:5]) for _ in range(N_FORWARD)])

    th, mu, gamma, Sigma, delta, w = _gw_prior(rng, graph, coords)
    smp = Sampler(_gw_images(rng, mu, gamma, delta, w), spec, seed=11, q0=GW_Q0)
    # fixed symmetric proposals, no adaptation
    smp.theta_adapt.log_scale = smp.white_adapt.log_scale = math.log(4.0)
    smp.scale_adapt.log_scale = math.log(5.0)
    chain = []
    for it in range(GW_BURN + GW_SWEEPS):
        smp.sweep()
        st = smp.state
        fields = [smp.field_values(k) for k in range(len(GW_IDS))]
        smp.replace_data(_gw_images(rng, st.mu, st.gamma, st.delta, fields).images)
        if it >= GW_BURN and (it - GW_BURN) % GW_THIN == 0:
            chain.append(_gw_scalars(st.theta, st.mu, st.gamma, st.Sigma, st.delta))
    chain = np.array(chain)
    p = np.array([ks_2samp(forward[:, j], chain[:, j]).pvalue for j in range(forward.shape[1])])
    level = 0.01 / len(p)
    worst = int(np.argmin(p))
    detail = f"min KS p {p[worst]:.4f} ({GW_NAMES[worst]}) vs Bonferroni level {level:.5f}, {len(chain)} chain draws"
    report(11, "Geweke joint-distribution test", p.min() > level, detail, time.perf_counter() - t, 1800)

