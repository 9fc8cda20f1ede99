import numpy as np
import pytest
from sklearn.base import clone

from hieropo import LearnedPolicy
from hieropo._validation import ConfigurationError
from hieropo.envsim import evaluate_policy, make_rng
from hieropo.recsys import (
    ALSFactorizer,
    EstimatedHierParams,
    Factorization,
    GaussianMixtureEM,
    GmmFit,
    PipelineError,
    RatingsMatrix,
    als_factorize,
    als_objective,
    build_recsys_environment,
    estimate_hier_params,
    feature_scale,
    gmm_fit,
    prepare,
    read_ratings,
    synthetic_ratings,
)


@pytest.fixture(scope="module")
def synthetic():
    return synthetic_ratings(n_users=120, n_items=60, rank=3, seed=1)


def two_clusters(seed=0, n=300, d=2, sep=10.0, spread=1.0):
    rng = np.random.default_rng(seed)
    centers = np.zeros((2, d))
    centers[1, 0] = sep * spread
    labels = rng.integers(2, size=n)
    return centers[labels] + spread * rng.standard_normal((n, d)), centers


class TestRatings:
    def test_remaps_labels(self):
        R = RatingsMatrix.from_triples(["b", "a", "b"], [10, 30, 30], [1.0, 2.0, 3.0])
        assert (R.n_users, R.n_items) == (2, 2)
        assert list(R.user_ids) == ["a", "b"] and list(R.item_ids) == [10, 30]
        np.testing.assert_array_equal(R.users, [1, 0, 1])

    def test_rejects_duplicates(self):
        with pytest.raises(ConfigurationError, match="duplicate"):
            RatingsMatrix.from_triples([1, 1], [2, 2], [1.0, 2.0])

    def test_reads_double_colon_format(self, tmp_path):
        p = tmp_path / "ratings.dat"
        p.write_text("1::10::5::978300760\n1::20::3::978300761\n2::10::4::978300762\n")
        R = read_ratings(p)
        assert (R.n_users, R.n_items, len(R)) == (2, 2, 3)
        np.testing.assert_array_equal(np.sort(R.ratings), [3, 4, 5])

    def test_reads_csv_with_header(self, tmp_path):
        p = tmp_path / "ratings.csv"
        p.write_text("user,item,rating\nu1,i1,2.5\nu2,i1,1.0\n")
        R = read_ratings(p)
        assert (R.n_users, R.n_items) == (2, 1)

    def test_bad_row_reports_line(self, tmp_path):
        p = tmp_path / "ratings.csv"
        p.write_text("u1,i1,2.5\nu2,i1,oops\n")
        with pytest.raises(ConfigurationError, match=":2:"):
            read_ratings(p)


class TestALS:
    def test_rank_one_exact_recovery(self):
        rng = np.random.default_rng(0)
        M = np.outer(rng.uniform(0.5, 2, 30), rng.uniform(0.5, 2, 20))
        fact = als_factorize(RatingsMatrix.from_dense(M), rank=1, reg=1e-6, sweeps=20)
        assert fact.rmse_trace[-1] <= 1e-4
        np.testing.assert_allclose(fact.U @ fact.V.T, M, atol=1e-3)

    def test_objective_nonincreasing_per_half_sweep(self, synthetic):
        R, _, _ = synthetic
        fact = als_factorize(R, rank=5, reg=0.1, sweeps=15)
        obj = np.array(fact.objective_trace)
        assert obj.size == 1 + 2 * 15
        assert np.all(np.diff(obj) <= 1e-9 * np.abs(obj[:-1]).clip(min=1))
        assert fact.objective_trace[-1] == pytest.approx(als_objective(R, fact.U, fact.V, 0.1), rel=1e-12)

    def test_heavy_regularization_shrinks_to_zero(self, synthetic):
        R, _, _ = synthetic
        fact = als_factorize(R, rank=3, reg=1e8, sweeps=3)
        assert np.abs(fact.U).max() < 1e-6 and np.abs(fact.V).max() < 1e-3
        assert fact.rmse_trace[-1] == pytest.approx(np.sqrt(np.mean(R.ratings**2)), rel=1e-6)

    def test_deterministic(self, synthetic):
        R, _, _ = synthetic
        a, b = als_factorize(R, 3, sweeps=3, seed=5), als_factorize(R, 3, sweeps=3, seed=5)
        np.testing.assert_array_equal(a.U, b.U)

    def test_needs_every_row_rated(self):
        R = RatingsMatrix([0], [0], [1.0], 2, 1)
        with pytest.raises(ConfigurationError, match="at least one rating"):
            als_factorize(R, 1)

    def test_estimator(self, synthetic):
        R, _, _ = synthetic
        est = ALSFactorizer(rank=3, sweeps=5).fit(R)
        assert est.user_factors_.shape == (120, 3)
        np.testing.assert_allclose(est.predict(R.users[:5], R.items[:5]), est.factorization_.predict(R.users[:5], R.items[:5]))
        assert clone(est).get_params()["rank"] == 3


class TestGMM:
    @pytest.mark.parametrize("spread, n, seed", [(1.0, 4000, 0), (0.1, 500, 3)])
    def test_two_cluster_recovery(self, spread, n, seed):
        # centers 10 sigma apart; mean error shrinks like sigma / sqrt(n / 2)
        X, centers = two_clusters(seed=seed, n=n, spread=spread)
        fit = gmm_fit(X, k=2, seed=seed)
        order = np.argsort(fit.means[:, 0])
        assert np.max(np.linalg.norm(fit.means[order] - centers, axis=1)) <= 0.1

    def test_single_component_closed_form(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(200, 3)) @ np.array([[1, 0.2, 0], [0, 1, 0.3], [0, 0, 0.5]])
        fit = gmm_fit(X, k=1)
        np.testing.assert_allclose(fit.means[0], X.mean(axis=0), atol=1e-10)
        np.testing.assert_allclose(fit.covariances[0], np.cov(X.T, bias=True), atol=1e-10)
        assert fit.weights[0] == 1.0

    def test_log_likelihood_nondecreasing(self):
        X, _ = two_clusters(seed=4, d=3, sep=3.0)
        fit = gmm_fit(X, k=4, seed=2, tol=0.0, max_iters=60)
        ll = np.array(fit.log_likelihood_trace)
        assert np.all(np.diff(ll) >= -1e-9)

    def test_weights_and_covariances(self):
        X, _ = two_clusters(seed=5, d=3)
        fit = gmm_fit(X, k=3)
        assert abs(fit.weights.sum() - 1) <= 1e-12
        for c in fit.covariances:
            assert np.linalg.eigvalsh(c)[0] > 0

    def test_duplicate_points_reinitialize_or_floor(self):
        X = np.vstack([np.zeros((20, 2)), np.ones((20, 2))])
        fit = gmm_fit(X, k=3, seed=0)
        assert np.all(np.isfinite(fit.means))
        for c in fit.covariances:
            assert np.linalg.eigvalsh(c)[0] >= 1e-6 * (1 - 1e-9)

    def test_needs_enough_points(self):
        with pytest.raises(ConfigurationError):
            gmm_fit(np.zeros((2, 2)), k=3)

    def test_estimator(self):
        X, _ = two_clusters()
        est = GaussianMixtureEM(n_components=2).fit(X)
        proba = est.predict_proba(X[:5])
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)
        np.testing.assert_array_equal(est.predict(X[:5]), proba.argmax(axis=1))


def toy_params(sizes_labels, k=2):
    """Hand-built factorization and mixture: user rows sit on the mixture centers."""
    centers = np.array([[0.0, 0.0], [4.0, 2.0], [-4.0, 2.0]])[:k]
    U = centers[sizes_labels]
    V = np.array([[0.1, 0.0], [0.0, 0.1], [0.05, 0.05]])
    covs = np.tile(0.01 * np.eye(2), (k, 1, 1))
    gmm = GmmFit(np.full(k, 1 / k), centers, covs, [], True)
    fact = Factorization(U, V, 2, 0.1, [])
    R = RatingsMatrix.from_dense(U @ V.T)
    return fact, gmm, R, centers


class TestEstimateParams:
    def test_two_centers(self):
        fact, gmm, R, centers = toy_params(np.array([0, 0, 1]))
        p = estimate_hier_params(fact, gmm, R)
        np.testing.assert_allclose(p.mu_q, centers.mean(axis=0))
        np.testing.assert_allclose(p.sigma_q, np.cov(centers.T, bias=True) + 1e-6 * np.eye(2))
        assert p.cluster == 0 and list(p.tasks) == [0, 1]
        np.testing.assert_array_equal(p.mu_star, centers[0])

    def test_zero_residual_is_floored(self):
        fact, gmm, R, _ = toy_params(np.array([0, 1, 1]))
        p = estimate_hier_params(fact, gmm, R)
        assert p.sigma_raw == pytest.approx(0.0, abs=1e-12) and p.sigma == 1e-6
        assert p.cluster == 1

    def test_ties_go_to_lowest_index(self):
        fact, gmm, R, _ = toy_params(np.array([1, 0, 1, 0]))
        assert estimate_hier_params(fact, gmm, R).cluster == 0

    def test_single_component_is_rejected(self):
        fact, gmm, R, _ = toy_params(np.array([0, 0]), k=1)
        with pytest.raises(ConfigurationError, match="k >= 2"):
            estimate_hier_params(fact, gmm, R)

    def test_model_config_is_valid(self):
        fact, gmm, R, _ = toy_params(np.array([0, 0, 1]))
        config = estimate_hier_params(fact, gmm, R).model_config()
        assert config.d == 2 and config.sigma > 0


class TestEnvironment:
    def test_whole_cluster(self):
        fact, gmm, R, _ = toy_params(np.array([0, 0, 1, 0]))
        p = estimate_hier_params(fact, gmm, R)
        env = build_recsys_environment(p, fact, K=2, m=3, seed=0)
        assert env.meta["users"] == [0, 1, 3]
        np.testing.assert_array_equal(env.thetas, fact.U[[0, 1, 3]])

    def test_cluster_too_small(self):
        fact, gmm, R, _ = toy_params(np.array([0, 0, 1]))
        p = estimate_hier_params(fact, gmm, R)
        with pytest.raises(ConfigurationError, match="2 users, fewer than m=3"):
            build_recsys_environment(p, fact, K=2, m=3)

    def test_single_action_has_no_regret(self):
        fact, gmm, R, _ = toy_params(np.array([0, 0, 1]))
        env = build_recsys_environment(estimate_hier_params(fact, gmm, R), fact, K=1, m=2)
        pol = LearnedPolicy("hier", 0.1, np.ones((2, 2)), np.tile(np.eye(2), (2, 1, 1)))
        assert evaluate_policy(env, pol, 0, 100, make_rng(0)).suboptimality == 0.0

    def test_feature_rescale(self):
        V = np.array([[3.0, 4.0], [0.3, 0.4]])
        assert feature_scale(V) == pytest.approx(0.2)
        assert feature_scale(0.1 * V) == 1.0
        fact = Factorization(np.zeros((2, 2)), V, 2, 0.1, [])
        p = EstimatedHierParams(np.zeros(2), np.eye(2), np.zeros(2), np.eye(2), 1.0, 1.0,
                                np.array([0, 1]), 0, np.array([2]), np.ones(2))
        env = build_recsys_environment(p, fact, K=2, m=2)
        assert np.linalg.norm(env.sampler.items, axis=1).max() == pytest.approx(1.0)
        assert env.meta["feature_scale"] == pytest.approx(0.2)

    def test_paired_rescale_keeps_actions(self):
        # scaling features by c and parameters by 1/c leaves every choice intact
        rng = np.random.default_rng(0)
        slates = rng.uniform(-1, 1, (100, 5, 3))
        pol = LearnedPolicy("hier", 0.0, rng.normal(size=(1, 3)), np.zeros((1, 3, 3)))
        scaled = LearnedPolicy("hier", 0.0, pol.means / 0.2, np.zeros((1, 3, 3)))
        np.testing.assert_array_equal(pol.act(0, slates), scaled.act(0, 0.2 * slates))


class TestPipeline:
    def test_end_to_end(self, synthetic):
        R, _, _ = synthetic
        fact, gmm, params = prepare(R, rank=3, k=3, sweeps=10)
        assert fact.U.shape == (120, 3) and gmm.k == 3
        assert params.tasks.size == params.cluster_sizes.max()
        assert params.sigma_q_raw_eigenvalues.size == 3

    def test_stage_errors_are_named(self, synthetic):
        R, _, _ = synthetic
        with pytest.raises(PipelineError, match="^als:"):
            prepare(R, rank=3, reg=0.0)
        with pytest.raises(PipelineError, match="^estimate:"):
            prepare(R, rank=3, k=1, sweeps=2)
        with pytest.raises(PipelineError, match="^gmm:"):
            prepare(RatingsMatrix.from_dense(np.ones((2, 2))), rank=1, k=3, sweeps=1)

    def test_synthetic_generator_covers_every_row(self):
        R, U, V = synthetic_ratings(n_users=50, n_items=40, density=0.05, seed=3)
        assert np.bincount(R.users, minlength=50).min() >= 1
        assert np.bincount(R.items, minlength=40).min() >= 1
        assert U.shape == (50, 4) and V.shape == (40, 4)
