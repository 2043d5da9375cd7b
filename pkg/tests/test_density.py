"""Tests for the per-bag Gaussian mixture machinery."""
import numpy as np
import pytest

from mespot.density import (
    GmmModel,
    em_fit,
    gmm_density,
    kmeans_init,
    logsumexp,
    reduce_latent,
    reduce_latent_seq,
    weighted_log_likelihood,
    weighted_log_likelihood_batch,
)
from mespot.errors import ShapeError


def single_gaussian_model(d=2):
    return GmmModel(
        bag_index=0,
        weights=np.array([1.0]),
        means=np.zeros((1, d)),
        covs=np.eye(d)[None],
    )


class TestReduceLatent:
    def test_constant_latent_pools_to_constant(self):
        lat = np.full((6, 6, 128), 0.7)
        out = reduce_latent(lat, "spatial-mean-pool")
        assert out.shape == (128,)
        np.testing.assert_allclose(out, 0.7)

    def test_flatten_reshape_roundtrip(self):
        rng = np.random.default_rng(0)
        lat = rng.standard_normal((3, 3, 4))
        flat = reduce_latent(lat, "none")
        assert flat.shape == (36,)
        np.testing.assert_allclose(flat.reshape(3, 3, 4), lat)

    def test_pooling_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        lat = rng.standard_normal((5, 4, 3))
        pooled = reduce_latent(lat, "spatial-mean-pool")
        for c in range(3):
            acc = 0.0
            for i in range(5):
                for j in range(4):
                    acc += lat[i, j, c]
            assert abs(pooled[c] - acc / 20.0) < 1e-12

    def test_sequence_reduction_shape(self):
        rng = np.random.default_rng(2)
        lat = rng.standard_normal((20, 6, 6, 8))
        assert reduce_latent_seq(lat, "spatial-mean-pool").shape == (20, 8)
        assert reduce_latent_seq(lat, "none").shape == (20, 288)


class TestLogsumexp:
    def test_matches_naive_on_moderate_values(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 5))
        np.testing.assert_allclose(
            logsumexp(x, axis=1), np.log(np.sum(np.exp(x), axis=1)), rtol=1e-12
        )

    def test_survives_extreme_values(self):
        x = np.array([-1e6, -1e6 + 1.0])
        out = float(logsumexp(x))
        assert np.isfinite(out)
        assert abs(out - (-1e6 + np.log(1 + np.e))) < 1e-6


class TestDensities:
    def test_standard_normal_at_origin(self):
        model = single_gaussian_model()
        assert abs(gmm_density(np.zeros(2), model) - 1.0 / (2 * np.pi)) < 1e-12

    def test_log_likelihood_at_origin(self):
        model = single_gaussian_model()
        assert abs(weighted_log_likelihood(np.zeros(2), model) - np.log(1.0 / (2 * np.pi))) < 1e-12

    def test_log_matches_linear_path_where_defined(self):
        rng = np.random.default_rng(4)
        model = GmmModel(
            bag_index=1,
            weights=np.array([0.3, 0.7]),
            means=rng.standard_normal((2, 3)),
            covs=np.stack([np.eye(3) * 0.8, np.eye(3) * 1.4]),
        )
        for _ in range(50):
            x = rng.standard_normal(3) * 2
            dens = gmm_density(x, model)
            if dens > 1e-300:
                assert abs(weighted_log_likelihood(x, model) - np.log(dens)) < 1e-9

    def test_moving_away_from_means_decreases_score(self):
        model = single_gaussian_model()
        direction = np.array([1.0, 0.5])
        scores = [weighted_log_likelihood(t * direction, model) for t in range(6)]
        assert all(a > b for a, b in zip(scores, scores[1:]))

    def test_upweighting_component_raises_density_at_its_mean(self):
        rng = np.random.default_rng(5)
        means = np.array([[0.0, 0.0], [4.0, 4.0]])
        covs = np.stack([np.eye(2), np.eye(2)])
        low = GmmModel(0, np.array([0.2, 0.8]), means, covs)
        high = GmmModel(0, np.array([0.6, 0.4]), means, covs)
        assert gmm_density(means[0], high) > gmm_density(means[0], low)

    def test_component_permutation_invariance(self):
        rng = np.random.default_rng(6)
        means = rng.standard_normal((3, 4))
        covs = np.stack([np.eye(4) * s for s in (0.5, 1.0, 2.0)])
        w = np.array([0.2, 0.3, 0.5])
        model = GmmModel(0, w, means, covs)
        perm = [2, 0, 1]
        permuted = GmmModel(0, w[perm], means[perm], covs[perm])
        for _ in range(20):
            x = rng.standard_normal(4)
            assert abs(
                weighted_log_likelihood(x, model) - weighted_log_likelihood(x, permuted)
            ) < 1e-9

    def test_dim_mismatch_raises(self):
        with pytest.raises(ShapeError):
            weighted_log_likelihood(np.zeros(3), single_gaussian_model(d=2))

    def test_pooled_scoring_ignores_mean_preserving_perturbations(self):
        rng = np.random.default_rng(7)
        model = single_gaussian_model(d=4)
        lat = rng.standard_normal((3, 3, 4))
        bump = rng.standard_normal((3, 3, 4))
        bump -= bump.mean(axis=(0, 1), keepdims=True)  # zero spatial mean
        a = weighted_log_likelihood(reduce_latent(lat, "spatial-mean-pool"), model)
        b = weighted_log_likelihood(reduce_latent(lat + bump, "spatial-mean-pool"), model)
        assert abs(a - b) < 1e-9


class TestKmeansInit:
    def test_single_component_is_sample_mean(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((40, 3)) + 2.0
        w, mu, cov = kmeans_init(x, 1, seed=0)
        np.testing.assert_allclose(w, [1.0])
        np.testing.assert_allclose(mu[0], x.mean(axis=0), atol=1e-12)
        assert cov.shape == (1, 3, 3)

    def test_two_separated_clouds_recovered(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((200, 2)) * 0.05 + [0, 0]
        b = rng.standard_normal((200, 2)) * 0.05 + [5, 5]
        x = np.vstack([a, b])
        _, mu, _ = kmeans_init(x, 2, seed=1)
        centers = sorted(mu.tolist())
        assert np.linalg.norm(np.array(centers[0]) - a.mean(axis=0)) < 0.1
        assert np.linalg.norm(np.array(centers[1]) - b.mean(axis=0)) < 0.1

    def test_seed_determinism(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((100, 4))
        r1 = kmeans_init(x, 3, seed=7)
        r2 = kmeans_init(x, 3, seed=7)
        for a, b in zip(r1, r2):
            np.testing.assert_array_equal(a, b)

    def test_too_few_samples_raises(self):
        with pytest.raises(ValueError):
            kmeans_init(np.zeros((2, 3)), 5, seed=0)


class TestEmFit:
    def test_single_gaussian_recovery_within_three_standard_errors(self):
        rng = np.random.default_rng(11)
        true_mu = np.array([1.0, -2.0, 0.5])
        n = 2000
        x = rng.standard_normal((n, 3)) + true_mu
        model = em_fit(x, kmeans_init(x, 1, seed=0))
        se = 1.0 / np.sqrt(n)  # unit variance data
        assert np.all(np.abs(model.means[0] - true_mu) < 3 * se + 1e-9)

    def test_fixed_point_at_single_component_mle(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((500, 2)) * 1.3 + 0.4
        mu = x.mean(axis=0, keepdims=True)
        cov = np.cov(x, rowvar=False, bias=True)[None]
        model = em_fit(x, (np.array([1.0]), mu, cov), tol=1e-4)
        assert np.max(np.abs(model.means - mu)) < 1e-4
        # covariance only moves by the ridge
        assert np.max(np.abs(model.covs[0] - cov[0])) < 1e-3

    def test_log_likelihood_trace_monotone(self):
        rng = np.random.default_rng(13)
        x = np.vstack([
            rng.standard_normal((150, 2)) * 0.5,
            rng.standard_normal((150, 2)) * 0.7 + [3, 1],
        ])
        model = em_fit(x, kmeans_init(x, 2, seed=3), tol=1e-8, max_iter=60)
        trace = np.array(model.ll_trace)
        assert np.all(np.diff(trace) >= -1e-8)

    def test_weights_sum_to_one_and_covs_spd(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((300, 3)) * [1.0, 2.0, 0.5]
        model = em_fit(x, kmeans_init(x, 3, seed=4))
        assert abs(model.weights.sum() - 1.0) < 1e-12
        for cov in model.covs:
            np.linalg.cholesky(cov)  # raises if not SPD

    def test_batch_scoring_matches_scalar(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((100, 2))
        model = em_fit(x, kmeans_init(x, 2, seed=5))
        pts = rng.standard_normal((10, 2))
        batch = weighted_log_likelihood_batch(pts, model)
        for i, p in enumerate(pts):
            assert abs(batch[i] - weighted_log_likelihood(p, model)) < 1e-12

    def test_invalid_tol_raises(self):
        with pytest.raises(ValueError):
            em_fit(np.zeros((10, 2)), (np.array([1.0]), np.zeros((1, 2)), np.eye(2)[None]), tol=0)
