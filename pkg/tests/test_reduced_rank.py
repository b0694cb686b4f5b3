import numpy as np
import pytest

from voxbayes.covariance import MaternParams, cov_matrix
from voxbayes.fields import RRField
from voxbayes.reduced_rank import KnotGeometry, grid_points, rr_cov, rr_interpolate, rr_logdensity, rr_sample, select_knots

from _util import lattice_points


@pytest.mark.parametrize("seed", range(5))
def test_domination_and_knot_exactness(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(30, 150))
    S = lattice_points(rng, n)
    th = MaternParams(rng.uniform(0.5, 10), rng.uniform(0.05, 1.5), rng.uniform(0.5, 2.5))
    C = cov_matrix(S, th)
    for a in (5, 10, 25):
        knots = select_knots(S, a)
        R = rr_cov(S, knots, th)
        assert np.linalg.eigvalsh(C - R).min() >= -1e-8 * th.sigma2
        np.testing.assert_allclose(R[np.ix_(knots, knots)], C[np.ix_(knots, knots)], atol=1e-10 * th.sigma2)


def test_full_rank_is_exact():
    rng = np.random.default_rng(11)
    S = lattice_points(rng, 25)
    th = MaternParams(2.0, 0.3, 1.5)
    R = rr_cov(S, select_knots(S, 25), th)
    assert np.max(np.abs(R - cov_matrix(S, th))) <= 1e-8


def test_knot_selection():
    rng = np.random.default_rng(12)
    S = lattice_points(rng, 200)
    for a in (1, 4, 7, 10, 25):
        k = select_knots(S, a)
        assert len(k) == a == len(set(k.tolist()))
    centroid = S.mean(axis=0)
    assert select_knots(S, 1)[0] == np.argmin(np.hypot(*(S - centroid).T))
    g = grid_points(S, 10)
    assert g.shape == (10, 2)
    assert len(np.unique(np.round(g[:, 1], 12))) == 3  # round(sqrt(10)) rows
    with pytest.raises(ValueError):
        select_knots(S, 201)


def test_interpolation_reproduces_knot_values():
    rng = np.random.default_rng(13)
    S = lattice_points(rng, 60)
    th = MaternParams(1.0, 0.5, 1.5)
    ks = KnotGeometry(S, 9).build(th)
    wstar, w = rr_sample(ks, 1)
    np.testing.assert_allclose(w[ks.knot_index], wstar, atol=1e-10)
    np.testing.assert_allclose(rr_interpolate(S, ks, th), ks.interp)
    np.testing.assert_allclose(ks.whitened @ np.linalg.solve(ks.chol, wstar), w, atol=1e-10)
    assert np.isfinite(rr_logdensity(wstar, ks))


def test_scaled_matches_rebuild():
    rng = np.random.default_rng(14)
    S = lattice_points(rng, 40)
    geo = KnotGeometry(S, 6)
    th = MaternParams(1.0, 0.5, 1.5)
    a = geo.build(th).scaled(4.0)
    b = geo.build(th.with_sigma2(4.0))
    np.testing.assert_allclose(a.chol, b.chol, rtol=1e-12)
    np.testing.assert_allclose(a.interp, b.interp, rtol=1e-10, atol=1e-12)


def test_gibbs_targets_knot_posterior():
    rng = np.random.default_rng(15)
    S = lattice_points(rng, 40)
    th = MaternParams(2.0, 0.6, 1.5)
    field = RRField(S, 5)
    b = field.build(th)
    z = rng.standard_normal(40)
    draws = np.array([field.gibbs(None, z, b, rng) for _ in range(20000)])
    H = b.interp
    Q = np.linalg.inv(b.knot_cov) + H.T @ H
    V = np.linalg.inv(Q)
    np.testing.assert_allclose(draws.mean(axis=0), V @ H.T @ z, atol=0.03)
    np.testing.assert_allclose(np.cov(draws.T), V, atol=0.03)
