import numpy as np
import pytest

from desense_kf.checks import random_model, random_prior, random_psd
from desense_kf.exceptions import DimensionError, SingularInnovationError
from desense_kf.filters import (
    Adkf,
    Conventional,
    FilterState,
    Ksdkf,
    check_scheme,
    compute_gain,
    cost_adkf,
    cost_ksdkf,
    gain_adkf,
    gain_cost,
    gain_kf,
    gain_ksdkf,
    innovation_covariance,
    innovation_matrix,
    ksdkf_residual,
    measurement_update,
    run_filter,
    scheme_cost,
    step,
    time_update,
)
from desense_kf.model import AffineModel, ParametricLinearModel
from desense_kf.montecarlo import simulate_truth
from desense_kf.oracle import fd_cost_gradient


class TestFilterState:
    """Test the filter state value"""

    def test_initial(self):
        x0 = np.array([10.0, -10.0])
        state = FilterState.initial(x0, 0.1 * np.eye(2), n_params=3)
        assert state.epoch == 0
        assert state.s.shape == (2, 3)
        assert not state.s.any()
        x0[0] = 0.0
        assert state.xhat[0] == 10.0

    def test_shapes(self):
        with pytest.raises(DimensionError):
            FilterState(xhat=np.zeros(2), p_cov=np.eye(3), s=np.zeros((2, 1)))

    def test_frozen(self):
        state = FilterState.initial(np.zeros(2), np.eye(2), 1)
        with pytest.raises(ValueError):
            state.p_cov[0, 0] = 2.0


class TestSchemes:
    """Test weighting scheme validation"""

    def test_non_psd(self):
        with pytest.raises(ValueError, match="ADKF"):
            Adkf(np.diag([1.0, -1.0]))
        with pytest.raises(ValueError, match="W_1"):
            Ksdkf((np.eye(2), -np.eye(2)))

    def test_caller_array_untouched(self):
        w = np.eye(2)
        Adkf(w)
        w[0, 0] = 3.0

    def test_check_scheme(self):
        check_scheme(Adkf(np.eye(2)), n_states=2, n_params=2)
        with pytest.raises(DimensionError):
            check_scheme(Adkf(np.eye(3)), n_states=2, n_params=2)
        with pytest.raises(DimensionError):
            check_scheme(Ksdkf((np.eye(2),)), n_states=2, n_params=2)
        with pytest.raises(DimensionError):
            check_scheme(Ksdkf((np.eye(3), np.eye(3))), n_states=2, n_params=2)


class TestTimeUpdate:
    """Test prediction of x̂, P and S"""

    def test_benchmark_first_step(self, benchmark):
        model, c = benchmark
        state = FilterState.initial(c.x0, c.p0_cov, 2)
        prior = time_update(state, model, c.nominal)
        phi = model.phi(c.nominal)
        assert prior.epoch == 1
        np.testing.assert_allclose(prior.xhat, phi @ c.x0)
        np.testing.assert_allclose(prior.p_cov, phi @ c.p0_cov @ phi.T + model.q)
        # S₀ = 0, so S⁻ is Ψ at x̂₀
        np.testing.assert_array_equal(prior.s, [[-10.0, 0.0], [0.0, 10.0]])

    def test_gamma_and_xi(self, benchmark):
        model, c = benchmark
        prior = time_update(FilterState.initial(c.x0, c.p0_cov, 2), model, c.nominal)
        np.testing.assert_array_equal(innovation_matrix(prior, model, c.nominal), prior.s)
        np.testing.assert_allclose(
            innovation_covariance(prior, model, c.nominal), prior.p_cov + np.eye(2)
        )


class TestGains:
    """Test the three gain computations on random priors"""

    def test_adkf_zero_weight_is_kf(self, rng):
        for _ in range(50):
            model = random_model(rng)
            prior, p_hat = random_prior(rng, model)
            gamma = innovation_matrix(prior, model, p_hat)
            ell = model.n_params
            np.testing.assert_array_equal(
                gain_adkf(prior, gamma, np.zeros((ell, ell)), model, p_hat),
                gain_kf(prior, model, p_hat),
            )

    def test_ksdkf_zero_weights_is_kf(self, rng):
        for _ in range(50):
            model = random_model(rng)
            prior, p_hat = random_prior(rng, model)
            gamma = innovation_matrix(prior, model, p_hat)
            zeros = [np.zeros((model.n_states, model.n_states))] * model.n_params
            k_kf = gain_kf(prior, model, p_hat)
            k_s = gain_ksdkf(prior, gamma, zeros, model, p_hat)
            assert np.max(np.abs(k_s - k_kf)) <= 1e-12 * max(1.0, np.max(np.abs(k_kf)))

    def test_scalar_parameter_equivalence(self, rng):
        for _ in range(50):
            model = random_model(rng, n_params=1)
            prior, p_hat = random_prior(rng, model)
            gamma = innovation_matrix(prior, model, p_hat)
            w = rng.uniform(0.01, 2.0)
            k_s = gain_ksdkf(prior, gamma, [w * np.eye(model.n_states)], model, p_hat)
            k_a = gain_adkf(prior, gamma, np.array([[w]]), model, p_hat)
            np.testing.assert_allclose(k_s, k_a, rtol=0, atol=1e-9 * max(1.0, np.max(np.abs(k_a))))

    def test_ksdkf_residual(self, rng):
        for _ in range(50):
            model = random_model(rng)
            prior, p_hat = random_prior(rng, model)
            gamma = innovation_matrix(prior, model, p_hat)
            w_list = [random_psd(rng, model.n_states) for _ in range(model.n_params)]
            gain = gain_ksdkf(prior, gamma, w_list, model, p_hat)
            assert ksdkf_residual(gain, prior, gamma, w_list, model, p_hat) <= 1e-9

    def test_ksdkf_weight_count(self, rng):
        model = random_model(rng, n_params=2)
        prior, p_hat = random_prior(rng, model)
        gamma = innovation_matrix(prior, model, p_hat)
        with pytest.raises(DimensionError):
            gain_ksdkf(prior, gamma, [np.eye(model.n_states)], model, p_hat)

    @pytest.mark.parametrize("kind", ["kf", "adkf", "ksdkf"])
    def test_stationarity(self, rng, kind):
        """Test each gain is a stationary point of the cost it minimizes"""
        for _ in range(20):
            model = random_model(rng)
            prior, p_hat = random_prior(rng, model)
            scheme = {
                "kf": Conventional(),
                "adkf": Adkf(random_psd(rng, model.n_params)),
                "ksdkf": Ksdkf(tuple(random_psd(rng, model.n_states) for _ in range(model.n_params))),
            }[kind]
            gain = compute_gain(prior, model, p_hat, scheme)

            def cost(k):
                return gain_cost(k, prior, model, p_hat, scheme)

            grad = fd_cost_gradient(cost, gain, eps=1e-5)
            assert np.max(np.abs(grad)) <= 1e-5 * (1.0 + abs(cost(gain)))

    def test_perturbed_gain_costs_more(self, rng):
        model = random_model(rng)
        prior, p_hat = random_prior(rng, model)
        scheme = Adkf(random_psd(rng, model.n_params))
        gain = compute_gain(prior, model, p_hat, scheme)
        cost = gain_cost(gain, prior, model, p_hat, scheme)
        assert gain_cost(gain + 0.01, prior, model, p_hat, scheme) > cost

    def test_singular_innovation(self):
        model = AffineModel(
            np.eye(2), np.eye(2), np.zeros((2, 2)), np.zeros((2, 2)), n_params=1
        )
        state = FilterState.initial(np.ones(2), np.zeros((2, 2)), 1)
        with pytest.raises(SingularInnovationError) as info:
            step(state, np.zeros(2), model, np.zeros(1), Conventional())
        assert info.value.epoch == 1


class TestMeasurementUpdate:
    """Test the update and its cost bookkeeping"""

    def test_joseph_matches_short_form_for_kf(self, rng):
        model = random_model(rng)
        prior, p_hat = random_prior(rng, model)
        gain = gain_kf(prior, model, p_hat)
        z = rng.standard_normal(model.n_measurements)
        posterior, record = measurement_update(prior, gain, z, model, p_hat, Conventional())
        h = model.h(p_hat)
        short = (np.eye(model.n_states) - gain @ h) @ prior.p_cov
        np.testing.assert_allclose(posterior.p_cov, short, atol=1e-10)
        np.testing.assert_array_equal(posterior.p_cov, posterior.p_cov.T)
        assert record.cost_penalty == 0.0
        assert record.cost_total == pytest.approx(np.trace(posterior.p_cov))

    def test_sensitivity_update(self, rng):
        model = random_model(rng)
        prior, p_hat = random_prior(rng, model)
        scheme = Adkf(random_psd(rng, model.n_params))
        gamma = innovation_matrix(prior, model, p_hat)
        gain = compute_gain(prior, model, p_hat, scheme, gamma)
        z = rng.standard_normal(model.n_measurements)
        posterior, record = measurement_update(prior, gain, z, model, p_hat, scheme)
        np.testing.assert_allclose(posterior.s, prior.s - gain @ gamma)
        np.testing.assert_allclose(record.innovation, z - model.h(p_hat) @ prior.xhat)
        total, penalty = cost_adkf(posterior, scheme.w_a)
        assert record.cost_total == total
        assert record.cost_penalty == penalty
        assert record.trace_p + record.cost_penalty == pytest.approx(record.cost_total, rel=1e-12)

    def test_costs_agree_for_scalar_parameter(self, rng):
        model = random_model(rng, n_params=1)
        prior, p_hat = random_prior(rng, model)
        w = 0.4
        gain = gain_kf(prior, model, p_hat)
        posterior, _ = measurement_update(
            prior, gain, np.zeros(model.n_measurements), model, p_hat, Conventional()
        )
        assert cost_adkf(posterior, np.array([[w]]))[1] == pytest.approx(
            cost_ksdkf(posterior, [w * np.eye(model.n_states)])[1]
        )

    def test_scheme_cost_dispatch(self, rng):
        model = random_model(rng)
        prior, p_hat = random_prior(rng, model)
        posterior, _ = measurement_update(
            prior,
            gain_kf(prior, model, p_hat),
            rng.standard_normal(model.n_measurements),
            model,
            p_hat,
            Conventional(),
        )
        w_a = random_psd(rng, model.n_params)
        w_list = [random_psd(rng, model.n_states) for _ in range(model.n_params)]
        assert scheme_cost(posterior, Conventional()) == (
            pytest.approx(np.trace(posterior.p_cov)),
            0.0,
        )
        assert scheme_cost(posterior, Adkf(w_a)) == cost_adkf(posterior, w_a)
        assert scheme_cost(posterior, Ksdkf(tuple(w_list))) == cost_ksdkf(posterior, w_list)

    def test_measurement_length(self, benchmark):
        model, c = benchmark
        prior = time_update(FilterState.initial(c.x0, c.p0_cov, 2), model, c.nominal)
        gain = gain_kf(prior, model, c.nominal)
        with pytest.raises(DimensionError):
            measurement_update(prior, gain, np.zeros(3), model, c.nominal, Conventional())


class TestRunFilter:
    """Test complete runs on the benchmark"""

    def test_shapes_and_epochs(self, benchmark, rng):
        model, c = benchmark
        _, z = simulate_truth(model, c.nominal, c.x0, rng, 20)
        run = run_filter(model, c.nominal, c.x0, c.p0_cov, z, Adkf(c.referential_weight))
        assert len(run.states) == len(run.records) == 20
        assert run.estimates.shape == (20, 2)
        assert [s.epoch for s in run.states] == list(range(1, 21))
        assert len(run.gains) == 20

    def test_one_step_optimality(self, benchmark, rng):
        """Test J_a after the ADKF update is strictly below J_a after the KF update"""
        model, c = benchmark
        scheme = Adkf(c.referential_weight)
        _, z = simulate_truth(model, c.nominal, c.x0, rng, 50)
        run = run_filter(model, c.nominal, c.x0, c.p0_cov, z, scheme)
        for posterior in [run.initial, *run.states[:-1]]:
            prior = time_update(posterior, model, c.nominal)
            j_adkf = gain_cost(
                compute_gain(prior, model, c.nominal, scheme), prior, model, c.nominal, scheme
            )
            j_kf = gain_cost(gain_kf(prior, model, c.nominal), prior, model, c.nominal, scheme)
            assert j_adkf < j_kf

    def test_desensitization_shrinks_sensitivity(self, benchmark, rng):
        model, c = benchmark
        _, z = simulate_truth(model, c.nominal, c.x0, rng, 30)
        kf = run_filter(model, c.nominal, c.x0, c.p0_cov, z, Conventional())
        adkf = run_filter(model, c.nominal, c.x0, c.p0_cov, z, Adkf(c.referential_weight))
        penalty_kf = [cost_adkf(s, c.referential_weight)[1] for s in kf.states]
        penalty_adkf = [r.cost_penalty for r in adkf.records]
        assert np.mean(penalty_adkf) < np.mean(penalty_kf)

    def test_rejects_continuous_model(self):
        model = AffineModel(
            -np.eye(1), np.eye(1), np.eye(1), np.eye(1), n_params=1, time_domain="continuous"
        )
        with pytest.raises(DimensionError):
            run_filter(model, np.zeros(1), np.zeros(1), np.eye(1), [np.zeros(1)], Conventional())

    def test_scheme_dimensions_checked(self, benchmark):
        model, c = benchmark
        with pytest.raises(DimensionError):
            run_filter(model, c.nominal, c.x0, c.p0_cov, [np.zeros(2)], Adkf(np.eye(3)))


def scalar_prior() -> tuple[AffineModel, FilterState]:
    """n = m = ℓ = 1 with P⁻ = 1, H = 1, R = 1, S⁻ = 1 and ∂H/∂p = 0, so γ = 1"""
    model = AffineModel(np.eye(1), np.eye(1), np.zeros((1, 1)), np.eye(1), n_params=1)
    prior = FilterState(
        xhat=np.zeros(1), p_cov=np.eye(1), s=np.ones((1, 1)), epoch=1
    )
    return model, prior


class TestHandExamples:
    """Test gains and updates against hand-worked values"""

    def test_scalar_gains(self):
        model, prior = scalar_prior()
        p_hat = np.zeros(1)
        gamma = innovation_matrix(prior, model, p_hat)
        np.testing.assert_array_equal(gamma, [[1.0]])
        assert gain_kf(prior, model, p_hat).item() == pytest.approx(0.5, abs=1e-15)
        # (1 + 1) / (1 + 1 + 1)
        adkf = gain_adkf(prior, gamma, np.eye(1), model, p_hat)
        assert adkf.item() == pytest.approx(2.0 / 3.0, abs=1e-15)
        # 2K + K = 1 + 1
        ksdkf = gain_ksdkf(prior, gamma, [np.eye(1)], model, p_hat)
        assert ksdkf.item() == pytest.approx(2.0 / 3.0, abs=1e-15)

    def test_unobservable_gain_is_zero(self, rng):
        model = AffineModel(np.eye(2), np.zeros((1, 2)), np.eye(2), np.eye(1), n_params=1)
        prior = FilterState(
            xhat=rng.standard_normal(2), p_cov=random_psd(rng, 2), s=np.zeros((2, 1)), epoch=1
        )
        np.testing.assert_array_equal(gain_kf(prior, model, np.zeros(1)), np.zeros((2, 1)))

    def test_zero_gain_keeps_prior(self, rng):
        model = random_model(rng)
        prior, p_hat = random_prior(rng, model)
        zero = np.zeros((model.n_states, model.n_measurements))
        z = rng.standard_normal(model.n_measurements)
        posterior, _ = measurement_update(prior, zero, z, model, p_hat, Conventional())
        np.testing.assert_array_equal(posterior.xhat, prior.xhat)
        np.testing.assert_allclose(posterior.p_cov, prior.p_cov, rtol=0, atol=1e-14)
        np.testing.assert_array_equal(posterior.s, prior.s)

    def test_perfect_measurement(self, benchmark):
        model, c = benchmark
        exact = AffineModel(
            model.phi(c.nominal), np.eye(2), model.q, np.zeros((2, 2)), n_params=2
        )
        prior = time_update(FilterState.initial(c.x0, c.p0_cov, 2), exact, c.nominal)
        z = np.array([8.5, -13.0])
        posterior, record = measurement_update(
            prior, np.eye(2), z, exact, c.nominal, Conventional()
        )
        np.testing.assert_allclose(posterior.xhat, z, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(posterior.p_cov, np.zeros((2, 2)))
        assert record.trace_p == 0.0


class TestCovarianceOracle:
    """Test the predicted covariance against sampled errors"""

    def test_sampled_prediction_errors(self, benchmark, rng):
        model, c = benchmark
        prior = time_update(FilterState.initial(c.x0, c.p0_cov, 2), model, c.nominal)
        phi = model.phi(c.nominal)
        n_samples = 400_000
        errors = rng.multivariate_normal(np.zeros(2), c.p0_cov, size=n_samples)
        noise = rng.multivariate_normal(np.zeros(2), model.q, size=n_samples)
        propagated = errors @ phi.T + noise
        np.testing.assert_allclose(np.cov(propagated.T), prior.p_cov, rtol=0, atol=2e-3)
        np.testing.assert_allclose(prior.xhat, [9.0, -14.0])


class TestSensitivityStacking:
    """Test column-wise and stacked sensitivity propagation agree"""

    def test_same_gain_same_sensitivity(self, rng):
        model = random_model(rng, n_params=3)
        state, p_hat = random_prior(rng, model)
        prior = time_update(state, model, p_hat)
        phi = model.phi(p_hat, state.epoch)
        for i in range(model.n_params):
            sigma = phi @ state.s[:, i] + model.dphi(p_hat, i) @ state.xhat
            np.testing.assert_allclose(prior.s[:, i], sigma, rtol=1e-12, atol=1e-12)

        gain = rng.standard_normal((model.n_states, model.n_measurements))
        z = rng.standard_normal(model.n_measurements)
        w_a = random_psd(rng, model.n_params)
        w_list = tuple(random_psd(rng, model.n_states) for _ in range(model.n_params))
        stacked, _ = measurement_update(prior, gain, z, model, p_hat, Adkf(w_a))
        columns, _ = measurement_update(prior, gain, z, model, p_hat, Ksdkf(w_list))
        np.testing.assert_array_equal(stacked.s, columns.s)
        np.testing.assert_array_equal(stacked.p_cov, columns.p_cov)

        h = model.h(p_hat, prior.epoch)
        for i in range(model.n_params):
            gamma_i = h @ prior.s[:, i] + model.dh(p_hat, i) @ prior.xhat
            np.testing.assert_allclose(
                columns.s[:, i], prior.s[:, i] - gain @ gamma_i, rtol=1e-12, atol=1e-12
            )


class DriftingModel(AffineModel):
    """Benchmark-like model whose Φ grows by 1% per epoch"""

    time_invariant = False

    def phi(self, p, epoch=0):
        return (1.0 + 0.01 * epoch) * super().phi(p, epoch)

    def dphi(self, p, i, epoch=0):
        return (1.0 + 0.01 * epoch) * super().dphi(p, i, epoch)

    def phi_jacobian_action(self, p, x, epoch=0):
        return ParametricLinearModel.phi_jacobian_action(self, p, x, epoch)

    def linearize(self, p, epoch=0):
        return ParametricLinearModel.linearize(self, p, epoch)


class TestTimeVaryingModel:
    """Test the per-epoch path of run_filter"""

    def drifting(self, benchmark) -> DriftingModel:
        model, c = benchmark
        return DriftingModel(
            model.phi(c.nominal),
            np.eye(2),
            model.q,
            model.r,
            phi_coeffs=[model.dphi(c.nominal, 0), model.dphi(c.nominal, 1)],
        )

    def test_epoch_reaches_phi(self, benchmark):
        model, c = benchmark
        drifting = self.drifting(benchmark)
        state = FilterState(xhat=c.x0, p_cov=c.p0_cov, s=np.zeros((2, 2)), epoch=3)
        prior = time_update(state, drifting, c.nominal)
        np.testing.assert_allclose(prior.xhat, 1.03 * model.phi(c.nominal) @ c.x0)

    def test_run_matches_stepping(self, benchmark, rng):
        model, c = benchmark
        drifting = self.drifting(benchmark)
        _, z = simulate_truth(model, c.nominal, c.x0, rng, 20)
        scheme = Adkf(c.referential_weight)
        run = run_filter(drifting, c.nominal, c.x0, c.p0_cov, z, scheme)
        state = FilterState.initial(c.x0, c.p0_cov, 2)
        for k, zk in enumerate(z):
            state, _ = step(state, zk, drifting, c.nominal, scheme)
            np.testing.assert_allclose(run.states[k].xhat, state.xhat, rtol=1e-12)
            np.testing.assert_allclose(run.states[k].s, state.s, rtol=1e-12, atol=1e-12)
        fixed = run_filter(model, c.nominal, c.x0, c.p0_cov, z, scheme)
        assert not np.allclose(fixed.estimates, run.estimates)
