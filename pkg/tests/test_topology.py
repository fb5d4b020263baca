import logging

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st
from sklearn.cluster import DBSCAN

from gridtwin.errors import DegenerateRow, IllConditioned, InsufficientSamples, NotATree, TooFewPoints
from gridtwin.fixtures import feeder13
from gridtwin.network import network_from_parents, random_tree, true_weighted_laplacian
from gridtwin.powerflow import SampleSet, generate_samples, solve_linearized
from gridtwin.topology import (
    LaplacianEstimate,
    _min_eig_arrow,
    auto_radius,
    dbscan_1d,
    default_gamma,
    fit_laplacian,
    fit_laplacian_full,
    orient_tree,
    recover_topology,
    verify_prop3,
)

from conftest import FIXTURES, fixture_data


def linear_samples(net, K, seed, scale=0.02):
    g = np.random.default_rng(seed)
    p = -g.uniform(0.2, 1.0, size=(K, net.n)) * scale
    q = -g.uniform(0.1, 0.5, size=(K, net.n)) * scale
    return SampleSet(p, q, solve_linearized(net, p, q), np.ones(K))


def dense_design(s: SampleSet, symmetric=True):
    """Explicit regression matrix for e = Y d - 2 lam p - 2 q, stacked over samples and rows."""
    K, n = s.K, s.n
    Dm = s.v - s.v0[:, None]
    if symmetric:
        iu, ju = np.triu_indices(n)
        cols = len(iu)
    else:
        cols = n * n
    M = np.zeros((K * n, cols + 1))
    b = np.zeros(K * n)
    for k in range(K):
        for i in range(n):
            row = k * n + i
            if symmetric:
                for c, (a, bb) in enumerate(zip(iu, ju)):
                    if a == i:
                        M[row, c] += Dm[k, bb]
                    if bb == i and a != bb:
                        M[row, c] += Dm[k, a]
            else:
                M[row, i * n:(i + 1) * n] = Dm[k]
            M[row, -1] = -2 * s.p[k, i]
            b[row] = 2 * s.q[k, i]
    return M, b


class TestFit:
    def test_homogeneous_linear_is_exact(self):
        net = network_from_parents([0, 1, 1, 2, 2, 3], [0.8 * x for x in (0.02, 0.01, 0.015, 0.005, 0.012, 0.02)],
                                   [0.02, 0.01, 0.015, 0.005, 0.012, 0.02])
        s = linear_samples(net, 40, 0)
        est = fit_laplacian(s)
        Yt = true_weighted_laplacian(net)
        assert np.linalg.norm(est.Y_star - Yt) / np.linalg.norm(Yt) <= 1e-6
        assert abs(est.lambda_star - 0.8) <= 1e-6
        np.testing.assert_array_equal(est.Y_star, est.Y_star.T)

    def test_matches_dense_least_squares(self, rng):
        n, K = 5, 30
        s = SampleSet(rng.normal(size=(K, n)), rng.normal(size=(K, n)), 1 + 0.01 * rng.normal(size=(K, n)), np.ones(K))
        M, b = dense_design(s)
        theta, *_ = np.linalg.lstsq(M, b, rcond=None)
        est = fit_laplacian(s)
        iu, ju = np.triu_indices(n)
        np.testing.assert_allclose(est.Y_star[iu, ju], theta[:-1], rtol=1e-8, atol=1e-8)
        assert est.lambda_star == pytest.approx(theta[-1], rel=1e-8)
        assert est.residual_norm == pytest.approx(np.linalg.norm(M @ theta - b), rel=1e-8)

    def test_full_fit_matches_dense_least_squares(self, rng):
        n, K = 4, 25
        s = SampleSet(rng.normal(size=(K, n)), rng.normal(size=(K, n)), 1 + 0.01 * rng.normal(size=(K, n)), np.ones(K))
        M, b = dense_design(s, symmetric=False)
        theta, *_ = np.linalg.lstsq(M, b, rcond=None)
        est = fit_laplacian_full(s)
        np.testing.assert_allclose(est.Y_star.ravel(), theta[:-1], rtol=1e-8, atol=1e-8)
        assert est.lambda_star == pytest.approx(theta[-1], rel=1e-8)

    def test_duplicated_samples(self):
        _, _, s = fixture_data("feeder13")
        a = fit_laplacian(s)
        idx = np.repeat(np.arange(s.K), 2)
        b = fit_laplacian(s.subset(idx))
        np.testing.assert_allclose(b.Y_star, a.Y_star, rtol=1e-9, atol=1e-9 * np.abs(a.Y_star).max())
        assert b.lambda_star == pytest.approx(a.lambda_star, rel=1e-9)

    def test_too_few_samples(self):
        _, _, s = fixture_data("feeder13")
        with pytest.raises(InsufficientSamples):
            fit_laplacian(s.subset(slice(0, 11)))

    def test_sample_ratio_warning_or_error(self, caplog):
        _, _, s = fixture_data("feeder13")
        short = s.subset(slice(0, 25))
        caplog.set_level(logging.WARNING, logger="gridtwin.topology")
        fit_laplacian(short)
        assert "below 3n" in caplog.text
        with pytest.raises(InsufficientSamples):
            fit_laplacian(short, strict_ratio=True)

    def test_unexcited_bus_is_ill_conditioned(self):
        net, _, s = fixture_data("feeder13")
        leaf = 9  # bus 10 (675) is a leaf; drop its load so it mirrors its parent
        p, q = s.p.copy(), s.q.copy()
        p[:, leaf] = q[:, leaf] = 0.0
        s2 = generate_samples(net, p, q)
        with pytest.raises(IllConditioned) as exc:
            fit_laplacian(s2)
        assert exc.value.condition > 1e12

    def test_condition_recorded(self, feeder):
        _, _, s, _ = feeder
        est = fit_laplacian(s)
        assert 1.0 < est.condition_diag < 1e12


def _partition(labels, mask):
    groups = {}
    for i in np.flatnonzero(mask):
        groups.setdefault(labels[i], set()).add(i)
    return sorted(map(frozenset, groups.values()), key=min)


@settings(max_examples=60, deadline=None)
@given(
    values=st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=40),
    radius=st.floats(0.05, 3.0),
    k=st.integers(1, 6),
)
@example(values=[0.0, 0.0, 0.0, 0.0, 2.0, 3.0, -4.3e-152], radius=2.0, k=6)  # distance rounds onto the radius
def test_dbscan_1d_matches_sklearn(values, radius, k):
    z = np.array(values)
    ours = dbscan_1d(z, radius, k)
    ref = DBSCAN(eps=radius, min_samples=k + 1).fit(z[:, None])
    core = np.zeros(len(z), dtype=bool)
    core[ref.core_sample_indices_] = True
    np.testing.assert_array_equal(ours == -1, ref.labels_ == -1)
    assert _partition(ours, core) == _partition(ref.labels_, core)


class TestClustering:
    def test_labels_in_value_order(self):
        lab = dbscan_1d([5.0, 5.1, 5.2, 0.0, 0.1, 0.2, 9.0], 0.15, 2)
        assert list(lab) == [1, 1, 1, 0, 0, 0, -1]

    def test_auto_radius_isolates_outlier(self):
        z = np.array([0.0, 0.0, 0.0, 0.0, -1.0])
        xi = auto_radius(z, 2)
        assert list(dbscan_1d(z, xi, 2)) == [0, 0, 0, 0, -1]

    @pytest.mark.parametrize("gamma", [2, 4, 6])
    def test_auto_radius_uniform_grid(self, gamma):
        h = 0.37
        xi = auto_radius(h * np.arange(100), gamma)
        assert gamma * h / 2 <= xi <= 2 * gamma * h

    def test_auto_radius_too_few(self):
        with pytest.raises(TooFewPoints):
            auto_radius([1.0, 2.0], 2)

    def test_default_gamma(self):
        assert default_gamma(10) == 4
        assert default_gamma(200) == 10


class TestRecover:
    def test_true_laplacian_of_path(self):
        n = 12
        net = network_from_parents(list(range(n)), [0.01] * n, np.linspace(0.005, 0.02, n))
        adj = recover_topology(true_weighted_laplacian(net))
        assert adj.edges == net.edges()
        assert adj.root_adjacent == [1]

    @pytest.mark.parametrize("seed", range(5))
    def test_true_laplacian_of_random_trees(self, seed):
        net = random_tree(30, np.random.default_rng(seed))
        Y = true_weighted_laplacian(net)
        isolated = [j for j in range(1, net.n + 1) if net.parent[j] == 0 and not net.children[j]]
        if isolated:
            # a root-adjacent leaf has an all-zero off-diagonal row in the exact Laplacian
            with pytest.raises(DegenerateRow):
                recover_topology(Y)
        else:
            assert recover_topology(Y).tree_edges() == net.edges(include_root=True)

    def test_fixture_exact_data(self, feeder):
        net, _, s, _ = feeder
        adj = recover_topology(fit_laplacian(s))
        assert adj.edges == net.edges()
        assert adj.root_adjacent == [j for j in range(1, net.n + 1) if net.parent[j] == 0]
        np.testing.assert_array_equal(adj.labels, adj.labels.T)
        assert not adj.labels.diagonal().any()

    def test_auto_matches_hand_tuned_radius(self):
        _, _, s = fixture_data("feeder13")
        est = fit_laplacian(s)
        assert recover_topology(est, xi=0.1).edges == recover_topology(est).edges

    def test_joint_clustering_flag(self):
        net, _, s = fixture_data("feeder13")
        adj = recover_topology(fit_laplacian(s), joint=True)
        assert adj.edges == net.edges()
        assert len(adj.rows) == 1

    def test_small_perturbation(self, rng):
        net, _, s = fixture_data("feeder13")
        est = fit_laplacian(s)
        Yt = true_weighted_laplacian(net)
        off = ~np.eye(net.n, dtype=bool) & (Yt != 0)
        eps = 0.01 * np.abs(est.Y_star[off]).min()
        noise = rng.uniform(-eps, eps, size=Yt.shape)
        Y2 = est.Y_star + (noise + noise.T) / 2
        assert recover_topology(Y2).edges == recover_topology(est).edges

    @pytest.mark.parametrize("seed", range(3))
    def test_relabeling_invariance(self, seed):
        net, _, s = fixture_data("feeder37")
        perm = np.random.default_rng(seed).permutation(net.n)
        s2 = SampleSet(s.p[:, perm], s.q[:, perm], s.v[:, perm], s.v0)
        adj = recover_topology(fit_laplacian(s2))
        back = {frozenset(int(perm[b - 1]) + 1 for b in e) for e in adj.edges}
        assert back == net.edges()

    def test_row_scaling_invariance(self, rng):
        _, _, s = fixture_data("feeder13")
        Y = fit_laplacian(s).Y_star
        c = rng.uniform(0.1, 10, size=Y.shape[0])
        assert recover_topology(c[:, None] * Y).edges == recover_topology(Y).edges

    def test_accepts_estimate_object(self):
        Y = true_weighted_laplacian(feeder13())
        a = recover_topology(LaplacianEstimate(Y, 1.0, 0.0, 1.0))
        assert a.edges == recover_topology(Y).edges

    def test_bad_hyperparameters(self):
        Y = true_weighted_laplacian(feeder13())
        with pytest.raises(ValueError):
            recover_topology(Y, gamma=0)
        with pytest.raises(ValueError):
            recover_topology(Y, xi=-1.0)


class TestOrient:
    def test_path(self):
        parents, layers = orient_tree([(0, 1), (1, 2)])
        assert parents == [0, 1]
        assert layers == {1: [1], 2: [2]}

    def test_feeder13_layers(self):
        net = feeder13()
        parents, layers = orient_tree(net.edges(include_root=True))
        assert parents == list(net.parent[1:])
        assert max(layers) == 4

    def test_chord(self):
        with pytest.raises(NotATree):
            orient_tree([(0, 1), (1, 2), (0, 2)])

    def test_disconnected(self):
        with pytest.raises(NotATree):
            orient_tree([(0, 1), (2, 3), (3, 2)])


class TestRobustnessBound:
    def test_min_eig_arrow_matches_dense(self, rng):
        n, K = 5, 40
        Dm = rng.normal(size=(K, n))
        P = rng.normal(size=(K, n))
        S, C, s = Dm.T @ Dm, P.T @ Dm, float(np.sum(P * P))
        H = np.zeros((n * n + 1, n * n + 1))
        H[:-1, :-1] = np.kron(np.eye(n), S)
        H[:-1, -1] = H[-1, :-1] = C.ravel()
        H[-1, -1] = s
        assert _min_eig_arrow(S, C, s) == pytest.approx(np.linalg.eigvalsh(H)[0], rel=1e-9)

    def test_homogeneous(self):
        net = network_from_parents([0, 1, 1, 2], [0.01, 0.02, 0.01, 0.005], [0.02, 0.04, 0.02, 0.01])
        cert = verify_prop3(net, linear_samples(net, 30, 1))
        assert cert.delta_norm == 0.0
        assert cert.lhs <= 1e-6
        assert cert.holds

    def test_heterogeneous_13bus(self):
        net = feeder13()
        cert = verify_prop3(net, linear_samples(net, 60, 2, scale=0.05))
        assert cert.eps > 0 and cert.delta_norm > 0
        assert cert.holds
        assert cert.rhs == pytest.approx(cert.eps * cert.delta_norm)
