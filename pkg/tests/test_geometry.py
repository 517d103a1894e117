import numpy as np
import pytest

from cellflow import geometry as G
from cellflow.numerics import make_rng


def chain_points():
    return np.array([[0.0], [1.0], [2.0]])


class TestDiffusionOperator:
    def test_two_points_rows_sum_to_one(self):
        op = G.diffusion_operator(np.array([[0.0], [1.0]]), k=1, t=1)
        np.testing.assert_allclose(op.P.sum(axis=1), 1.0, atol=1e-10)
        assert op.P[0, 0] == pytest.approx(op.P[1, 1])
        assert np.all(op.P >= 0)

    def test_row_stochastic_random(self):
        X = make_rng(30, 0).standard_normal((25, 3))
        op = G.diffusion_operator(X, k=4, t=2)
        np.testing.assert_allclose(op.P @ np.ones(25), 1.0, atol=1e-10)

    def test_chain_nearer_is_likelier(self):
        op = G.diffusion_operator(chain_points(), k=1, t=1)
        # direct kernel computation: bandwidth is the 1-NN distance (=1)
        D = np.abs(chain_points() - chain_points().T)
        K = np.exp(-D ** 2)
        K = 0.5 * (K + K.T)
        P = K / K.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(op.P, P, atol=1e-12)
        assert op.P[0, 1] > op.P[0, 2]

    def test_duplicate_points_bandwidth_fallback(self):
        X = np.array([[0.0], [0.0], [1.0], [2.0]])
        op = G.diffusion_operator(X, k=1, t=1)
        assert np.all(op.bandwidths > 0)

    def test_all_identical_rejected(self):
        with pytest.raises(ValueError):
            G.diffusion_operator(np.zeros((4, 2)), k=1, t=1)

    def test_powers_remain_row_stochastic(self):
        X = make_rng(31, 0).standard_normal((20, 2))
        op = G.diffusion_operator(X, k=3, t=8)
        Pt = np.linalg.matrix_power(op.P, op.t)
        np.testing.assert_allclose(Pt @ np.ones(20), 1.0, atol=1e-8)


class TestPotentialDistances:
    def test_identical_rows_zero(self):
        P = np.array([[0.4, 0.3, 0.3], [0.4, 0.3, 0.3], [0.2, 0.2, 0.6]])
        pd = G.potential_distances(G.DiffusionOperator(P, np.ones(3), t=1))
        assert pd.D[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_symmetry_and_zero_diagonal(self):
        X = make_rng(32, 0).standard_normal((15, 2))
        pd = G.potential_distances(G.diffusion_operator(X, k=3, t=4))
        np.testing.assert_allclose(pd.D, pd.D.T, atol=1e-10)
        assert np.all(np.diag(pd.D) == 0)

    def test_chain_monotone_with_direct_formula(self):
        op = G.diffusion_operator(chain_points(), k=1, t=2)
        pd = G.potential_distances(op)
        Pt = np.linalg.matrix_power(op.P, 2)
        L = np.log(Pt + 1e-7)
        want_01 = np.linalg.norm(L[0] - L[1])
        want_02 = np.linalg.norm(L[0] - L[2])
        assert pd.D[0, 1] == pytest.approx(want_01, abs=1e-12)
        assert pd.D[0, 2] == pytest.approx(want_02, abs=1e-12)
        assert pd.D[0, 2] > pd.D[0, 1]

    def test_triangle_inequality_on_triples(self):
        X = make_rng(33, 0).standard_normal((12, 2))
        D = G.potential_distances(G.diffusion_operator(X, k=3, t=3)).D
        rng = make_rng(33, 1)
        for _ in range(200):
            i, j, k = rng.choice(12, size=3, replace=False)
            assert D[i, k] <= D[i, j] + D[j, k] + 1e-10


def noisy_circle(n=100, seed=0):
    rng = make_rng(seed, 9)
    theta = np.linspace(0, 2 * np.pi, n, endpoint=False)
    X = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return X + 0.03 * rng.standard_normal((n, 2))


class TestTrainGaga:
    def test_pure_reconstruction_decreases(self):
        X = make_rng(34, 0).standard_normal((50, 5))
        cfg = G.GagaConfig(latent_dim=3, hidden=(32,), epochs=10, batch_size=50,
                           lambda_geo=0.0, lambda_rec=1.0, lr=3e-3, seed=1)
        ae = G.train_gaga(X, np.zeros((50, 50)), cfg)
        hist = ae.loss_history
        assert all(b < a for a, b in zip(hist, hist[1:]))

    def test_duplicate_rows_identical_latents(self):
        rng = make_rng(35, 0)
        X = rng.standard_normal((20, 4))
        X[7] = X[3]
        op = G.diffusion_operator(X, k=3, t=2)
        cfg = G.GagaConfig(latent_dim=2, hidden=(16,), epochs=5, batch_size=20, seed=0)
        ae = G.train_gaga(X, G.potential_distances(op), cfg)
        Z = G.encode(ae, X)
        np.testing.assert_array_equal(Z[7], Z[3])

    def test_encode_deterministic(self):
        X = make_rng(36, 0).standard_normal((15, 3))
        cfg = G.GagaConfig(latent_dim=2, hidden=(16,), epochs=3, batch_size=15, seed=0)
        ae = G.train_gaga(X, np.zeros((15, 15)), cfg)
        np.testing.assert_array_equal(G.encode(ae, X), G.encode(ae, X))

    def test_final_epoch_loss_not_above_first(self):
        X = noisy_circle(60, seed=2)
        targets = G.potential_distances(G.diffusion_operator(X, k=5, t=4))
        cfg = G.GagaConfig(latent_dim=2, hidden=(32,), epochs=40, batch_size=60, seed=3)
        ae = G.train_gaga(X, targets, cfg)
        assert ae.loss_history[-1] <= ae.loss_history[0]

    def test_circle_isometry_correlation(self):
        X = noisy_circle(100, seed=4)
        targets = G.potential_distances(G.diffusion_operator(X, k=5, t=8))
        cfg = G.GagaConfig(latent_dim=2, hidden=(64, 64), epochs=300,
                           batch_size=100, lambda_geo=1.0, lambda_rec=0.1,
                           lr=1e-3, seed=5)
        ae = G.train_gaga(X, targets, cfg)
        Z = G.encode(ae, X)
        diff = Z[:, None, :] - Z[None, :, :]
        latent_d = np.sqrt((diff ** 2).sum(axis=2))
        iu = np.triu_indices(100, k=1)
        r = np.corrcoef(latent_d[iu], targets.D[iu])[0, 1]
        assert r >= 0.9

    def test_reconstruction_within_15_percent(self):
        X = noisy_circle(80, seed=6)
        targets = G.potential_distances(G.diffusion_operator(X, k=5, t=4))
        cfg = G.GagaConfig(latent_dim=2, hidden=(64,), epochs=400, batch_size=80,
                           lambda_geo=0.1, lambda_rec=1.0, lr=2e-3, seed=7)
        ae = G.train_gaga(X, targets, cfg)
        Xr = G.decode(ae, G.encode(ae, X))
        rel = np.linalg.norm(Xr - X) / np.linalg.norm(X)
        assert rel <= 0.15

    def test_roundtrip_shapes(self):
        X = make_rng(37, 0).standard_normal((10, 6))
        cfg = G.GagaConfig(latent_dim=2, hidden=(8,), epochs=1, batch_size=10, seed=0)
        ae = G.train_gaga(X, np.zeros((10, 10)), cfg)
        Z = G.encode(ae, X)
        assert Z.shape == (10, 2)
        assert G.decode(ae, Z).shape == (10, 6)
