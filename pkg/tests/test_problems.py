import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmlbo.problems import (
    NEG_INF,
    BoxPrior,
    GaussianSpec,
    LikelihoodSpec,
    ProblemSpec,
    SimulatorError,
    SimulatorHandle,
    chol_spd,
    log_gaussian_density,
    log_likelihood,
    log_prior,
    mahalanobis_sq,
    sample_prior,
)


def _log_gaussian_direct(x, mu, cov):
    """Independent reference: explicit inverse and slogdet."""
    x = np.atleast_1d(np.asarray(x, float))
    mu = np.atleast_1d(np.asarray(mu, float))
    cov = np.atleast_2d(np.asarray(cov, float))
    r = x - mu
    _, logdet = np.linalg.slogdet(cov)
    return float(-0.5 * (x.size * np.log(2 * np.pi) + logdet + r @ np.linalg.inv(cov) @ r))


def identity_problem(d=1, data=None, obs_sd=1.0):
    sim = SimulatorHandle(lambda x: x.copy(), d, d)
    prior = GaussianSpec(np.zeros(d), np.eye(d))
    data = np.zeros(d) if data is None else np.asarray(data, float)
    return ProblemSpec(sim, prior, LikelihoodSpec(data, obs_sd ** 2 * np.eye(d)))


class TestMahalanobis:
    def test_identity_covariance(self):
        assert mahalanobis_sq(np.array([3.0, 4.0]), np.eye(2)) == pytest.approx(25.0)

    def test_diagonal_scaling(self):
        assert mahalanobis_sq(np.array([2.0, 0.0]), np.diag([4.0, 1.0])) == pytest.approx(1.0)

    def test_hand_inverse_2x2(self):
        # inv([[2,1],[1,2]]) = [[2,-1],[-1,2]]/3, so (1,1) maps to 2/3
        cov = np.array([[2.0, 1.0], [1.0, 2.0]])
        assert mahalanobis_sq(np.array([1.0, 1.0]), cov) == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_zero_iff_zero_vector(self):
        cov = np.array([[2.0, 0.3], [0.3, 1.0]])
        assert mahalanobis_sq(np.zeros(2), cov) <= 1e-12
        assert mahalanobis_sq(np.array([1e-5, 0.0]), cov) > 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=6),
           st.randoms(use_true_random=False))
    def test_permutation_invariance(self, values, pyrng):
        y = np.asarray(values)
        n = y.size
        rng = np.random.default_rng(pyrng.randrange(2 ** 32))
        q, r = np.linalg.qr(rng.standard_normal((n, n)))
        cov = q @ np.diag(rng.uniform(0.5, 2.0, n)) @ q.T
        cov = 0.5 * (cov + cov.T)
        perm = rng.permutation(n)
        base = mahalanobis_sq(y, cov)
        permuted = mahalanobis_sq(y[perm], cov[np.ix_(perm, perm)])
        assert permuted == pytest.approx(base, rel=1e-9, abs=1e-12)

    def test_dimension_mismatch_names_matrix(self):
        with pytest.raises(ValueError, match="obs_cov"):
            mahalanobis_sq(np.ones(3), np.eye(2), name="obs_cov")

    def test_non_spd_matrix_is_hard_error(self):
        with pytest.raises(ValueError, match="not positive definite"):
            mahalanobis_sq(np.ones(2), np.array([[1.0, 0.0], [0.0, -1.0]]))


class TestCholSpd:
    def test_single_jitter_round_rescues_semidefinite(self):
        # rank-deficient PSD matrix: one jitter round must make it factorizable
        v = np.array([1.0, 2.0])
        mat = np.outer(v, v)
        L = chol_spd(mat, name="gram")
        assert np.allclose(L @ L.T, mat, atol=1e-8)

    def test_names_offender_on_failure(self):
        with pytest.raises(ValueError, match="prior covariance"):
            chol_spd(-np.eye(2), name="prior covariance")


class TestLogGaussianDensity:
    def test_standard_normal_at_mode(self):
        spec = GaussianSpec(0.0, 1.0)
        assert log_gaussian_density(0.0, spec) == pytest.approx(-0.5 * np.log(2 * np.pi))

    def test_2d_standard_normal_at_mode(self):
        spec = GaussianSpec([0.0, 0.0], np.eye(2))
        assert log_gaussian_density([0.0, 0.0], spec) == pytest.approx(-np.log(2 * np.pi))

    def test_hand_value_and_direct_inverse_oracle(self):
        spec = GaussianSpec([1.0, 0.0], np.diag([4.0, 1.0]))
        got = log_gaussian_density([3.0, 1.0], spec)
        assert got == pytest.approx(-3.531025, abs=1e-6)
        assert got == pytest.approx(_log_gaussian_direct([3, 1], [1, 0], np.diag([4.0, 1.0])),
                                    abs=1e-12)

    @pytest.mark.parametrize("mu,var", [(0.0, 1.0), (-2.0, 0.25), (3.5, 7.0)])
    def test_grid_quadrature_integrates_to_one(self, mu, var):
        spec = GaussianSpec(mu, var)
        sd = np.sqrt(var)
        grid = np.linspace(mu - 10 * sd, mu + 10 * sd, 20001)
        dens = np.exp([log_gaussian_density(x, spec) for x in grid])
        integral = float(np.sum((dens[1:] + dens[:-1]) / 2 * np.diff(grid)))
        assert integral == pytest.approx(1.0, abs=1e-4)

    def test_asymmetric_covariance_rejected(self):
        with pytest.raises(ValueError, match="symmetric"):
            GaussianSpec([0.0, 0.0], np.array([[1.0, 0.5], [0.2, 1.0]]))


class TestLogLikelihood:
    def test_zero_residual(self):
        prob = identity_problem(3, data=[0.5, -0.5, 1.0])
        got = log_likelihood(np.array([0.5, -0.5, 1.0]), prob)
        assert got == pytest.approx(-1.5 * np.log(2 * np.pi))

    def test_scalar_residual_two(self):
        prob = identity_problem(1, data=[2.0])
        assert log_likelihood(np.array([0.0]), prob) == pytest.approx(
            -0.5 * np.log(2 * np.pi) - 2.0)

    def test_matches_log_gaussian_density_of_residual(self):
        rng = np.random.default_rng(7)
        d = 4
        data = rng.standard_normal(d)
        prob = identity_problem(d, data=data, obs_sd=0.7)
        x = rng.standard_normal(d)
        direct = log_gaussian_density(data - x, GaussianSpec(np.zeros(d), 0.49 * np.eye(d)))
        assert log_likelihood(x, prob) == pytest.approx(direct, abs=1e-12)

    def test_precomputed_fx_is_bitwise_equal_and_free(self):
        prob = identity_problem(2, data=[1.0, 2.0])
        x = np.array([0.3, 0.4])
        direct = log_likelihood(x, prob)
        before = prob.simulator.eval_counter
        via_fx = log_likelihood(x, prob, fx=x.copy())
        assert via_fx == direct
        assert prob.simulator.eval_counter == before

    def test_simulator_failure_carries_input(self):
        def bad(x):
            raise RuntimeError("boom")

        sim = SimulatorHandle(bad, 2, 2)
        prob = ProblemSpec(sim, BoxPrior([-1, -1], [1, 1]),
                           LikelihoodSpec([0.0, 0.0], np.eye(2)))
        with pytest.raises(SimulatorError) as err:
            log_likelihood(np.array([0.1, 0.2]), prob)
        assert np.allclose(err.value.x, [0.1, 0.2])


class TestLogPrior:
    def test_inside_box_is_zero(self):
        prior = BoxPrior([-1.0, -1.0], [1.0, 1.0])
        assert log_prior(np.array([0.2, -0.9]), prior) == 0.0

    def test_outside_box_is_neg_inf(self):
        prior = BoxPrior([-1.0, -1.0], [1.0, 1.0])
        assert log_prior(np.array([0.2, 1.5]), prior) == NEG_INF

    def test_gaussian_prior_delegates(self):
        spec = GaussianSpec([0.5], [[2.0]])
        x = np.array([0.1])
        assert log_prior(x, spec) == log_gaussian_density(x, spec)

    def test_sentinel_propagates_through_sums(self):
        assert NEG_INF + 123.4 == NEG_INF

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_box_samples_always_feasible(self, seed):
        rng = np.random.default_rng(seed)
        prior = BoxPrior([-2.0, 0.0, 1.0], [-1.0, 3.0, 1.5])
        x = sample_prior(prior, rng)
        assert log_prior(x, prior) == 0.0


class TestSimulatorHandle:
    def test_deterministic_and_counts_once_per_call(self):
        sim = SimulatorHandle(lambda x: np.array([x @ x]), 3, 1)
        x = np.array([1.0, 2.0, 3.0])
        a = sim(x)
        b = sim(x)
        assert a.tobytes() == b.tobytes()
        assert sim.eval_counter == 2

    def test_analysis_calls_tracked_separately(self):
        sim = SimulatorHandle(lambda x: x.copy(), 2, 2)
        sim(np.zeros(2))
        with sim.analysis():
            sim(np.ones(2))
            sim(np.ones(2))
        assert sim.eval_counter == 1
        assert sim.analysis_counter == 2

    def test_concurrent_counting_is_exact(self):
        import threading

        sim = SimulatorHandle(lambda x: x.copy(), 1, 1)

        def work():
            for _ in range(200):
                sim(np.array([1.0]))

        threads = [threading.Thread(target=work) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sim.eval_counter == 1600


class TestProblemSpec:
    def test_prior_dimension_must_match(self):
        sim = SimulatorHandle(lambda x: x.copy(), 3, 3)
        with pytest.raises(ValueError, match="prior dimension"):
            ProblemSpec(sim, BoxPrior([-1, -1], [1, 1]),
                        LikelihoodSpec(np.zeros(3), np.eye(3)))

    def test_likelihood_dimension_must_match(self):
        sim = SimulatorHandle(lambda x: x[:2].copy(), 3, 2)
        with pytest.raises(ValueError, match="likelihood dimension"):
            ProblemSpec(sim, BoxPrior([-1] * 3, [1] * 3),
                        LikelihoodSpec(np.zeros(3), np.eye(3)))

    def test_box_bounds_must_be_ordered(self):
        with pytest.raises(ValueError, match="lower < upper"):
            BoxPrior([0.0, 0.0], [1.0, 0.0])
