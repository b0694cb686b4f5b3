import numpy as np
import scipy.sparse as sp
import pytest
from scipy.stats import ks_2samp

from voxbayes.covariance import MaternParams, cov_matrix, pairwise_dist
from voxbayes.fields import DenseField, NNGPField
from voxbayes.fullgp import gp_logdensity
from voxbayes.nngp import (
    NNGPGeometry,
    build_neighbors,
    greedy_coloring,
    nngp_factors,
    nngp_logdensity,
    nngp_precision,
    nngp_sample,
    order_voxels,
)

from _util import lattice_points


def random_theta(rng):
    return MaternParams(rng.uniform(0.2, 10), rng.uniform(0.05, 2), rng.uniform(0.3, 3))


@pytest.mark.parametrize("seed", range(6))
def test_full_conditioning_is_exact(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 120))
    S = lattice_points(rng, n)
    th = random_theta(rng)
    f = NNGPGeometry(S, max(n - 1, 1)).factors(th)
    w = rng.standard_normal(n) * np.sqrt(th.sigma2)
    assert abs(nngp_logdensity(w, f) - gp_logdensity(w, S, th)) <= 1e-8
    P = nngp_precision(f).toarray()
    np.testing.assert_allclose(P @ cov_matrix(S, th), np.eye(n), atol=1e-6)


def test_neighbors_are_nearest_earlier_voxels():
    rng = np.random.default_rng(1)
    S = lattice_points(rng, 80, size=15)
    order = order_voxels(S)
    assert np.all(np.diff(S[order, 0]) >= 0)
    g = build_neighbors(S, 6, order)
    P = S[order]
    for t in range(80):
        nb = g.neighbor_set(t)
        assert len(nb) == min(t, 6)
        if t == 0:
            continue
        d_all = np.hypot(*(P[:t] - P[t]).T)
        d_nb = np.hypot(*(S[nb] - P[t]).T)
        # every chosen neighbor is at least as close as every excluded earlier voxel
        assert d_nb.max() <= np.sort(d_all)[len(nb) - 1] + 1e-15
        pos = {v: k for k, v in enumerate(order)}
        assert all(pos[v] < t for v in nb)


def test_precision_sparsity_and_symmetry():
    rng = np.random.default_rng(2)
    S = lattice_points(rng, 300, size=30)
    for m in (3, 8):
        P = nngp_precision(NNGPGeometry(S, m).factors(MaternParams(1, 0.3, 1.5)))
        # distinct pairs are bounded by m(m+1)n/2; the full matrix stores each twice
        assert sp.triu(P, 1).nnz <= m * (m + 1) * 300 / 2
        assert P.nnz - np.count_nonzero(P.diagonal()) <= m * (m + 1) * 300
        assert abs(P - P.T).max() == 0


def test_quadratic_form_matches_precision():
    rng = np.random.default_rng(3)
    S = lattice_points(rng, 60)
    th = random_theta(rng)
    f = NNGPGeometry(S, 5).factors(th)
    w = rng.standard_normal(60)
    P = nngp_precision(f)
    logdet = -np.sum(np.log(f.F))
    ref = 0.5 * logdet - 0.5 * (60 * np.log(2 * np.pi) + w @ (P @ w))
    assert nngp_logdensity(w, f) == pytest.approx(ref, rel=1e-10)
    # P is positive definite with log det matching the factorization
    assert np.linalg.slogdet(P.toarray())[1] == pytest.approx(logdet, rel=1e-8)


def test_relabeling_invariance():
    rng = np.random.default_rng(4)
    S = lattice_points(rng, 50)
    th = random_theta(rng)
    w = rng.standard_normal(50)
    p = rng.permutation(50)
    a = nngp_logdensity(w, NNGPGeometry(S, 7).factors(th))
    b = nngp_logdensity(w[p], NNGPGeometry(S[p], 7).factors(th))
    assert a == pytest.approx(b, rel=1e-12)


def test_sample_covariance_matches_precision():
    rng = np.random.default_rng(5)
    S = lattice_points(rng, 8)
    th = MaternParams(2.0, 0.8, 1.0)
    f = NNGPGeometry(S, 3).factors(th)
    draws = np.array([nngp_sample(f, rng) for _ in range(20000)])
    target = np.linalg.inv(nngp_precision(f).toarray())
    np.testing.assert_allclose(np.cov(draws.T), target, atol=0.1)


def test_coloring_is_proper():
    rng = np.random.default_rng(6)
    S = lattice_points(rng, 200)
    geo = NNGPGeometry(S, 10)
    P = nngp_precision(geo.factors(MaternParams(1, 0.5, 1)))
    classes = geo.coloring()
    assert sorted(np.concatenate(classes).tolist()) == list(range(200))
    for K in classes:
        block = P[K][:, K].toarray()
        assert np.count_nonzero(block - np.diag(np.diag(block))) == 0
    assert len(greedy_coloring(P)) <= 1 + max(np.diff(P.indptr))


def test_scatter_layout_matches_sparse_product():
    rng = np.random.default_rng(7)
    S = lattice_points(rng, 150)
    field = NNGPField(S, 8)
    b = field.build(random_theta(rng))
    P = nngp_precision(b.factors)
    perm = field.geometry.precision_layout()[4]
    Pp = P[perm].tocsr()
    Pp.sort_indices()
    assert np.array_equal(Pp.indices, field.indices)
    np.testing.assert_allclose(b.data, Pp.data, rtol=1e-12, atol=1e-12 * abs(Pp.data).max())
    np.testing.assert_allclose(b.diag, P.diagonal(), rtol=1e-12)


def test_factors_helper_and_scaling():
    rng = np.random.default_rng(8)
    S = lattice_points(rng, 40)
    th = MaternParams(2.0, 0.4, 1.5)
    g = build_neighbors(S, 4, order_voxels(S))
    f = nngp_factors(g, S, th)
    f3 = f.scaled(3.0)
    f3_direct = nngp_factors(g, S, th.with_sigma2(6.0))
    np.testing.assert_allclose(f3.F, f3_direct.F, rtol=1e-12)
    np.testing.assert_allclose(f3.B, f3_direct.B, rtol=1e-10, atol=1e-12)


def test_gibbs_stationary_matches_dense_posterior():
    # with m = n - 1 the NNGP is the dense GP, so the chain must target the dense conditional
    rng = np.random.default_rng(9)
    S = lattice_points(rng, 30, size=9)
    th = MaternParams(1.5, 0.6, 1.5)
    z = rng.standard_normal(30)
    nn = NNGPField(S, 29)
    bn = nn.build(th)
    dense = DenseField(S)
    bd = dense.build(th)
    w = np.zeros(30)
    chain, ref = [], []
    for it in range(6000):
        w = nn.gibbs(w, z, bn, rng)
        if it >= 500:
            chain.append(w.copy())
    chain = np.array(chain)
    ref = np.array([dense.gibbs(None, z, bd, rng) for _ in range(4000)])
    C = cov_matrix(S, th)
    mean = C @ np.linalg.solve(C + np.eye(30), z)
    np.testing.assert_allclose(chain.mean(axis=0), mean, atol=0.08)
    np.testing.assert_allclose(dense.conditional_mean(z, bd), mean, atol=1e-10)
    for j in (0, 13, 29):
        assert ks_2samp(chain[::10, j], ref[:, j]).pvalue > 0.001


@pytest.mark.parametrize("seed", range(4))
def test_collapsed_marginal_matches_dense(seed):
    rng = np.random.default_rng(40 + seed)
    n = int(rng.integers(5, 80))
    S = lattice_points(rng, n, size=15)
    f = NNGPField(S, int(rng.integers(1, 8)))
    b = f.build(random_theta(rng))
    C = np.linalg.inv(b.P.toarray())
    z = 2 * rng.standard_normal(n)
    ll, _ = f.marginal(z, b)
    _, logdet = np.linalg.slogdet(C + np.eye(n))
    ref = -0.5 * (n * np.log(2 * np.pi) + logdet + z @ np.linalg.solve(C + np.eye(n), z))
    assert abs(ll - ref) <= 1e-8 * max(1.0, abs(ref))


def test_conditional_draw_moments():
    rng = np.random.default_rng(44)
    S = lattice_points(rng, 40, size=10)
    f = NNGPField(S, 5)
    b = f.build(MaternParams(3.0, 0.5, 1.5))
    z = rng.standard_normal(40)
    _, fac = f.marginal(z, b)
    M = b.P.toarray() + np.eye(40)
    draws = np.array([f.conditional_draw(b, fac, rng) for _ in range(20000)])
    np.testing.assert_allclose(draws.mean(axis=0), np.linalg.solve(M, z), atol=0.025)
    np.testing.assert_allclose(np.cov(draws.T), np.linalg.inv(M), atol=0.03)


def test_sigma2_to_zero_collapses_field():
    rng = np.random.default_rng(10)
    S = lattice_points(rng, 40)
    field = NNGPField(S, 5)
    b = field.build(MaternParams(1e-10, 0.5, 1.5))
    w = field.gibbs(np.zeros(40), rng.standard_normal(40) * 3, b, rng)
    assert np.max(np.abs(w)) < 1e-3


def test_distances_helper():
    a = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert pairwise_dist(a)[0, 1] == 5.0
