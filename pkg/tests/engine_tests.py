"""Tests for the numerical core: Riccati solver, noise laws, posterior
potential, Langevin sampler and the closed-loop simulator."""

import dataclasses
import math

import numpy as np
import pytest
import scipy.linalg as la
from scipy import integrate, stats

from engine import langevin as langevin_module
from engine import simulator as simulator_module
from engine.errors import (CalibrationFailure, DimensionMismatch, InvalidLambda, InvalidModel,
                           NonConvergence, NumericalBlowup, RejectionExhausted, ReservoirEmpty,
                           StateBlowup)
from engine.langevin import UlaSchedule, naive_schedule, sample_with_rejection, step_schedule, ula_chain
from engine.lqr import (AdmissibleSet, CostSpec, SystemParams, average_cost, closed_loop, gain,
                        in_admissible_set, riccati_map, solve_riccati, spectral_radius)
from engine.noise import (AsymmetricNoise, GaussianMixtureNoise, GaussianNoise, _check_drift,
                          build_asymmetric, load_reservoir, log_density_hessian_spectrum)
from engine.posterior import PotentialState, init_potential
from engine.simulator import (ExcitationSpec, RunRecord, SimulationConfig, episode_schedule, excitation,
                              regret_series, run_psrl_baseline, run_tsld)
from harness.config import PRESETS


def _preset_system(name):
    preset = PRESETS[name]
    return SystemParams(np.array(preset['A']), np.array(preset['B']))


def _default_cost(n, n_u):
    return CostSpec(2.0 * np.eye(n), np.eye(n_u))


def _central_difference(f, x, h=1e-5):
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return grad


def _random_state(rng, noise, n_u, lam, size):
    state = PotentialState(lam, np.zeros((noise.dim + n_u) * noise.dim), noise, n_u)
    return state.ingest([(rng.standard_normal(noise.dim + n_u), rng.standard_normal(noise.dim))
                         for _ in range(size)])


def _simulation(system, noise, horizon, lam=5.0, prior_mean=0.5, **overrides):
    cost = _default_cost(system.n, system.n_u)
    fields = dict(system=system, noise=noise, cost=cost,
                  admissible=AdmissibleSet(20.0, 0.99, 20000.0, cost), lam=lam,
                  prior_mean=np.full(system.d * system.n, prior_mean), horizon=horizon,
                  excitation=ExcitationSpec.isotropic(system.n_u))
    fields.update(overrides)
    return SimulationConfig(**fields)


# -----------------------------------------------------------------------
# LQR core
# -----------------------------------------------------------------------


class TestRiccati:

    def test_zero_dynamics_collapse_to_q(self):
        params = SystemParams(np.zeros((3, 3)), np.eye(3))
        solution = solve_riccati(params, _default_cost(3, 3))
        np.testing.assert_allclose(solution.P_star, 2.0 * np.eye(3), atol=1e-12)
        np.testing.assert_allclose(solution.K, np.zeros((3, 3)), atol=1e-12)
        np.testing.assert_allclose(gain(params, solution.P_star, np.eye(3)), 0.0, atol=1e-12)

    def test_scalar_quadratic_oracle(self):
        """p* is the positive root of p^2 - 1.25 p - 2 = 0."""
        params = SystemParams(np.array([[0.5]]), np.array([[1.0]]))
        solution = solve_riccati(params, CostSpec(np.array([[2.0]]), np.array([[1.0]])))
        p = (1.25 + math.sqrt(1.25 ** 2 + 8.0)) / 2.0
        assert solution.P_star[0, 0] == pytest.approx(p, abs=1e-8)
        assert solution.P_star[0, 0] == pytest.approx(2.1712, abs=1e-4)
        assert solution.K[0, 0] == pytest.approx(-0.3423, abs=1e-4)
        assert closed_loop(params, solution.K)[0, 0] == pytest.approx(0.1577, abs=1e-4)

    @pytest.mark.parametrize('preset, radius', [
        ('paper-3x3', 0.3365),
        ('paper-5x5', 0.3187),
        ('paper-10x10', 0.3839),
    ])
    def test_benchmark_closed_loop_radius(self, preset, radius):
        params = _preset_system(preset)
        solution = solve_riccati(params, _default_cost(params.n, params.n_u))
        assert spectral_radius(closed_loop(params, solution.K)) == pytest.approx(radius, abs=5e-4)

    def test_fixed_point_residual(self):
        params = _preset_system('paper-5x5')
        cost = _default_cost(5, 5)
        solution = solve_riccati(params, cost, tol=1e-10)
        assert solution.residual <= 1e-10
        assert np.linalg.norm(riccati_map(params, cost, solution.P_star) - solution.P_star) <= 1e-10
        np.testing.assert_allclose(solution.P_star, solution.P_star.T, atol=0)
        assert np.min(la.eigvalsh(solution.P_star)) >= np.min(la.eigvalsh(cost.Q)) - 1e-9

    def test_agrees_with_scipy_dare(self):
        params = _preset_system('paper-3x3')
        cost = _default_cost(3, 3)
        expected = la.solve_discrete_are(params.A, params.B, cost.Q, cost.R)
        np.testing.assert_allclose(solve_riccati(params, cost).P_star, expected, rtol=1e-8, atol=1e-8)

    def test_unstabilizable_pair_does_not_converge(self):
        params = SystemParams(np.array([[1.5]]), np.array([[0.0]]))
        with pytest.raises(NonConvergence) as info:
            solve_riccati(params, CostSpec(np.array([[2.0]]), np.array([[1.0]])))
        assert info.value.iterations > 0

    def test_budget_exhaustion_reports_residual(self):
        params = _preset_system('paper-3x3')
        with pytest.raises(NonConvergence) as info:
            solve_riccati(params, _default_cost(3, 3), tol=1e-14, max_iter=2)
        assert info.value.residual > 1e-14

    def test_fills_average_cost_with_noise_covariance(self):
        params = _preset_system('paper-3x3')
        W = np.eye(3) + 0.25 * np.ones((3, 3))
        solution = solve_riccati(params, _default_cost(3, 3), W=W)
        assert solution.J == pytest.approx(np.trace(W @ solution.P_star), rel=1e-12)

    @pytest.mark.parametrize('P, W, expected', [
        (2.0 * np.eye(3), np.eye(3), 6.0),
        (np.diag([3.0, 4.0]), np.diag([1.0, 2.0]), 11.0),
    ])
    def test_average_cost(self, P, W, expected):
        assert average_cost(P, W) == pytest.approx(expected)

    def test_average_cost_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            average_cost(np.eye(2), np.eye(3))

    def test_system_params_theta_blocks_are_rows(self):
        params = _preset_system('paper-3x3')
        blocks = params.theta.reshape(3, 6)
        np.testing.assert_array_equal(blocks[0], np.concatenate((params.A[0], params.B[0])))
        rebuilt = SystemParams.from_theta(params.theta, 3, 3)
        np.testing.assert_array_equal(rebuilt.A, params.A)
        np.testing.assert_array_equal(rebuilt.B, params.B)

    def test_cost_validation(self):
        with pytest.raises(InvalidModel):
            CostSpec(np.eye(2), np.zeros((1, 1)))
        with pytest.raises(InvalidModel):
            CostSpec(np.array([[1.0, 2.0], [0.0, 1.0]]), np.eye(1))


class TestAdmissibleSet:

    def setup_method(self):
        self.cost = _default_cost(3, 3)
        self.admissible = AdmissibleSet(20.0, 0.99, 20000.0, self.cost)
        self.W = GaussianMixtureNoise(np.full(3, 0.5)).W

    def test_true_benchmark_system_is_admitted(self):
        verdict = in_admissible_set(_preset_system('paper-3x3'), self.admissible, self.W)
        assert verdict.admitted and bool(verdict)
        assert verdict.failed_clause is None
        assert verdict.spectral_radius == pytest.approx(0.3365, abs=5e-4)
        assert verdict.spectral_norm <= 0.99
        assert verdict.solution is not None

    def test_norm_clause(self):
        theta = _preset_system('paper-3x3').theta
        far = SystemParams.from_theta(theta * (40.0 / np.linalg.norm(theta)), 3, 3)
        verdict = in_admissible_set(far, self.admissible, self.W)
        assert not verdict.admitted
        assert verdict.failed_clause == 'norm'
        assert verdict.norm == pytest.approx(40.0)

    def test_diverging_riccati_is_a_rejection(self):
        cost = CostSpec(np.array([[2.0]]), np.array([[1.0]]))
        verdict = in_admissible_set(SystemParams(np.array([[1.5]]), np.array([[0.0]])),
                                    AdmissibleSet(20.0, 0.99, 20000.0, cost), np.eye(1))
        assert not verdict.admitted
        assert verdict.failed_clause == 'riccati'

    def test_closed_loop_and_cost_clauses(self):
        params = _preset_system('paper-3x3')
        tight = AdmissibleSet(20.0, 0.1, 20000.0, self.cost)
        assert in_admissible_set(params, tight, self.W).failed_clause == 'closed_loop_norm'
        cheap = AdmissibleSet(20.0, 0.99, 1.0, self.cost)
        assert in_admissible_set(params, cheap, self.W).failed_clause == 'average_cost'

    def test_invalid_bounds(self):
        with pytest.raises(InvalidModel):
            AdmissibleSet(20.0, 1.0, 20000.0, self.cost)

    def test_membership_is_monotone_in_the_bounds(self):
        rng = np.random.default_rng(16)
        theta = _preset_system('paper-3x3').theta
        loose = AdmissibleSet(20.0, 0.99, 20000.0, self.cost)
        tighter = [AdmissibleSet(3.0, 0.99, 20000.0, self.cost),
                   AdmissibleSet(20.0, 0.5, 20000.0, self.cost),
                   AdmissibleSet(20.0, 0.99, 30.0, self.cost),
                   AdmissibleSet(3.0, 0.5, 30.0, self.cost)]
        flips = 0
        for scale in np.linspace(0.0, 0.6, 40):
            candidate = SystemParams.from_theta(theta + scale * rng.standard_normal(theta.size), 3, 3)
            admitted = in_admissible_set(candidate, loose, self.W).admitted
            for bounds in tighter:
                if in_admissible_set(candidate, bounds, self.W).admitted:
                    assert admitted
                elif admitted:
                    flips += 1
        assert flips > 0


# -----------------------------------------------------------------------
# Noise models
# -----------------------------------------------------------------------


def _models():
    return [GaussianNoise(np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.1], [0.0, 0.1, 0.5]])),
            GaussianMixtureNoise(np.full(3, 0.5)),
            AsymmetricNoise(3, 1.0, 10.0, -1.0, 1.0)]


class TestNoiseModels:

    def test_gaussian_basics(self):
        noise = GaussianNoise.standard(3)
        np.testing.assert_array_equal(noise.log_pdf_grad(np.zeros(3)), np.zeros(3))
        rng = np.random.default_rng(1)
        for w in rng.standard_normal((5, 3)):
            np.testing.assert_allclose(noise.log_pdf_hessian(w), -np.eye(3))
        assert noise.hessian_bounds() == pytest.approx((1.0, 1.0))

    def test_mixture_score(self):
        a = np.full(3, 0.5)
        noise = GaussianMixtureNoise(a)
        np.testing.assert_allclose(noise.log_pdf_grad(np.zeros(3)), 0.0, atol=1e-15)
        expected = -(a - a + 2.0 * a / (1.0 + math.exp(2.0 * a @ a)))
        np.testing.assert_allclose(noise.log_pdf_grad(a), expected, rtol=1e-12)
        fd = _central_difference(lambda v: float(noise.log_pdf(v)), a.copy(), h=1e-6)
        np.testing.assert_allclose(noise.log_pdf_grad(a), fd, rtol=1e-6, atol=1e-9)

    def test_mixture_hessian_at_origin(self):
        a = np.full(3, 0.5)
        noise = GaussianMixtureNoise(a)
        np.testing.assert_allclose(noise.log_pdf_hessian(np.zeros(3)), -(np.eye(3) - np.outer(a, a)),
                                   atol=1e-15)

    @pytest.mark.parametrize('dim, offset, bounds', [
        (3, 0.5, (0.25, 1.0)),
        (5, 0.25, (11.0 / 16.0, 1.0)),
        (10, 0.125, (27.0 / 32.0, 1.0)),
    ])
    def test_mixture_bounds(self, dim, offset, bounds):
        assert GaussianMixtureNoise(np.full(dim, offset)).hessian_bounds() == pytest.approx(bounds)

    def test_mixture_requires_log_concavity(self):
        with pytest.raises(InvalidModel):
            GaussianMixtureNoise(np.full(4, 0.5))

    def test_mixture_is_symmetric(self):
        noise = GaussianMixtureNoise(np.array([0.5, -0.2, 0.3]))
        w = 2.0 * np.random.default_rng(17).standard_normal((200, 3))
        np.testing.assert_allclose(noise.log_pdf(-w), noise.log_pdf(w), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(noise.log_pdf_grad(-w), -noise.log_pdf_grad(w), rtol=1e-12, atol=1e-12)

    def test_gaussian_sampler_matches_its_cdf(self):
        draws = GaussianNoise.standard(3).sample(np.random.default_rng(18), 100_000)
        for i in range(3):
            assert stats.kstest(draws[:, i], 'norm').pvalue > 1e-3

    def test_mixture_sampler_matches_its_cdf(self):
        a = np.full(3, 0.5)
        draws = GaussianMixtureNoise(a).sample(np.random.default_rng(19), 100_000)
        # Marginal of one coordinate: equal mixture of N(a_i, 1) and N(-a_i, 1)
        def cdf(x, s):
            return 0.5 * (stats.norm.cdf(x - s) + stats.norm.cdf(x + s))

        for i in range(3):
            assert stats.kstest(draws[:, i], cdf, args=(a[i],)).pvalue > 1e-3

    def test_asymmetric_curvature_regions(self):
        noise = AsymmetricNoise(3, 1.0, 10.0, -1.0, 1.0)
        assert noise.log_pdf_hessian(np.array([0.3, -0.2, -2.0]))[2, 2] == pytest.approx(-1.0)
        assert noise.log_pdf_hessian(np.array([0.3, -0.2, 1.5]))[2, 2] == pytest.approx(-10.0)
        assert noise.log_pdf_hessian(np.array([0.3, -0.2, 0.0]))[2, 2] == pytest.approx(-5.5)
        assert noise.log_pdf_hessian(np.zeros(3))[0, 0] == pytest.approx(-1.0)
        assert noise.hessian_bounds() == (1.0, 10.0)

    def test_asymmetric_validation(self):
        with pytest.raises(InvalidModel):
            AsymmetricNoise(3, 1.0, 10.0, 1.0, -1.0)
        with pytest.raises(InvalidModel):
            AsymmetricNoise(3, 2.0, 1.0, -1.0, 1.0)
        with pytest.raises(DimensionMismatch):
            AsymmetricNoise(3, 1.0, 10.0, -1.0, 1.0, mask=[True, False])

    @pytest.mark.parametrize('noise', _models(), ids=lambda m: m.kind)
    def test_score_matches_log_density(self, noise):
        rng = np.random.default_rng(11)
        for w in 1.5 * rng.standard_normal((100, 3)):
            fd = _central_difference(lambda v: float(noise.log_pdf(v)), w)
            np.testing.assert_allclose(noise.log_pdf_grad(w), fd, rtol=1e-4, atol=1e-6)

    @pytest.mark.parametrize('noise', _models(), ids=lambda m: m.kind)
    def test_hessian_matches_score(self, noise):
        rng = np.random.default_rng(12)
        for w in 1.5 * rng.standard_normal((100, 3)):
            fd = np.column_stack([
                (noise.log_pdf_grad(w + h) - noise.log_pdf_grad(w - h)) / 2e-6
                for h in 1e-6 * np.eye(3)])
            np.testing.assert_allclose(noise.log_pdf_hessian(w), fd, rtol=1e-4, atol=1e-5)

    @pytest.mark.parametrize('noise', _models(), ids=lambda m: m.kind)
    def test_hessian_spectrum_within_bounds(self, noise):
        lo, hi = noise.hessian_bounds()
        eig = log_density_hessian_spectrum(noise, 3.0 * np.random.default_rng(13).standard_normal((500, 3)))
        assert np.all(eig >= lo - 1e-10) and np.all(eig <= hi + 1e-10)

    @pytest.mark.parametrize('noise', _models(), ids=lambda m: m.kind)
    def test_batched_evaluation(self, noise):
        w = np.random.default_rng(14).standard_normal((4, 7, 3))
        assert noise.log_pdf(w).shape == (4, 7)
        assert noise.log_pdf_grad(w).shape == (4, 7, 3)
        assert noise.log_pdf_hessian(w).shape == (4, 7, 3, 3)
        np.testing.assert_allclose(noise.log_pdf_grad(w)[2, 5], noise.log_pdf_grad(w[2, 5]))

    def test_gaussian_sample_mean(self):
        draws = GaussianNoise.standard(3).sample(np.random.default_rng(2), 100_000)
        assert draws.shape == (100_000, 3)
        assert np.all(np.abs(draws.mean(axis=0)) < 4.0 / math.sqrt(100_000))

    def test_mixture_sample_covariance(self):
        noise = GaussianMixtureNoise(np.full(3, 0.5))
        draws = noise.sample(np.random.default_rng(3), 100_000)
        np.testing.assert_allclose(np.cov(draws, rowvar=False), noise.W, atol=0.03)
        assert noise.sample(np.random.default_rng(3)).shape == (3,)


class TestAsymmetricCalibration:

    @pytest.fixture(scope='class')
    def calibrated(self):
        return build_asymmetric(3, 1.0, 10.0, reservoir_size=50_000, rng=np.random.default_rng(5),
                                burn_in=10_000, thinning=10, n_chains=1000)

    def test_uncalibrated_model_cannot_sample(self):
        noise = AsymmetricNoise(3, 1.0, 10.0, -1.0, 1.0)
        assert not noise.calibrated
        with pytest.raises(ReservoirEmpty):
            noise.sample(np.random.default_rng(0))
        with pytest.raises(ReservoirEmpty):
            noise.W

    def test_reservoir_is_recentered(self, calibrated):
        np.testing.assert_allclose(calibrated.reservoir.mean(axis=0), 0.0, atol=1e-12)
        draws = calibrated.sample(np.random.default_rng(6), 20_000)
        assert abs(draws[:, 2].mean()) < 4.0 * draws[:, 2].std() / math.sqrt(20_000)

    def test_shift_is_folded_into_the_score(self, calibrated):
        # Score of the recentered law is the raw score evaluated at w + shift
        raw = calibrated._raw_score(np.zeros(3) + calibrated.shift)
        np.testing.assert_allclose(calibrated.log_pdf_grad(np.zeros(3)), raw)
        assert calibrated.shift[2] < 0.0

    def test_reservoir_matches_the_target_density(self, calibrated):
        # The first n_chains rows hold one time slice of independent chains
        draws = calibrated.reservoir[:1000] + calibrated.shift
        grid = np.linspace(-12.0, 12.0, 240_001)
        density = np.exp(-calibrated._potential(grid))
        cdf = integrate.cumulative_trapezoid(density, grid, initial=0.0)
        cdf /= cdf[-1]
        assert stats.kstest(draws[:, 2], lambda x: np.interp(x, grid, cdf)).pvalue > 1e-3
        assert stats.kstest(draws[:, 0], 'norm').pvalue > 1e-3

    def test_equal_curvatures_reduce_to_gaussian(self):
        noise = build_asymmetric(3, 4.0, 4.0, reservoir_size=100_000, rng=np.random.default_rng(7),
                                 burn_in=2000, thinning=50, n_chains=1000)
        np.testing.assert_allclose(np.diag(noise.W), [1.0, 1.0, 0.25], rtol=0.05)
        np.testing.assert_allclose(noise.W[0, 2], 0.0, atol=0.02)

    def test_reservoir_cache_round_trip(self, calibrated, tmp_path):
        path = str(tmp_path / 'reservoir.bin')
        calibrated.save_reservoir(path)
        raw = load_reservoir(path)
        assert raw.shape == (50_000, 3)
        loaded = build_asymmetric(3, 1.0, 10.0, reservoir_size=50_000, cache_path=path)
        np.testing.assert_array_equal(loaded.reservoir, calibrated.reservoir)
        np.testing.assert_array_equal(loaded.W, calibrated.W)

    def test_truncated_cache(self, tmp_path):
        path = tmp_path / 'broken.bin'
        path.write_bytes(b'\x03\x00')
        with pytest.raises(ReservoirEmpty):
            load_reservoir(str(path))

    def test_drift_diagnostic(self):
        raw = np.concatenate((np.zeros((500, 2)), np.ones((500, 2)))) + \
            0.01 * np.random.default_rng(8).standard_normal((1000, 2))
        with pytest.raises(CalibrationFailure):
            _check_drift(raw, 0.05)
        _check_drift(np.random.default_rng(9).standard_normal((100_000, 2)), 0.05)


# -----------------------------------------------------------------------
# Posterior potential
# -----------------------------------------------------------------------


class TestPotentialState:

    def test_prior_only_state(self):
        state = init_potential(5.0, np.full(18, 0.5), GaussianMixtureNoise(np.full(3, 0.5)))
        assert (state.n, state.n_u, state.d, state.dn) == (3, 3, 6, 18)
        np.testing.assert_array_equal(state.gram, 5.0 * np.eye(6))
        np.testing.assert_allclose(state.newton_minimize(), state.prior_mean)
        np.testing.assert_allclose(state.grad_potential(state.prior_mean), 0.0)
        assert state.precond_spectrum() == pytest.approx((5.0, 5.0))

    def test_lambda_below_one(self):
        with pytest.raises(InvalidLambda):
            PotentialState(0.5, np.zeros(2), GaussianNoise.standard(1), 1)

    def test_prior_mean_dimension(self):
        with pytest.raises(DimensionMismatch):
            PotentialState(1.0, np.zeros(5), GaussianNoise.standard(1), 1)

    def test_ingest_single_pair(self):
        state = PotentialState(1.0, np.zeros(2), GaussianNoise.standard(1), 1)
        assert state.ingest([]) is state and state.size == 0 and state.t == 1
        state.ingest([(np.array([1.0, 0.0]), np.array([2.0]))])
        np.testing.assert_array_equal(state.gram, np.diag([2.0, 1.0]))
        assert state.precond_spectrum() == pytest.approx((1.0, 2.0))
        assert state.t == 2

    def test_ingest_rejects_bad_shapes(self):
        state = PotentialState(1.0, np.zeros(2), GaussianNoise.standard(1), 1)
        with pytest.raises(DimensionMismatch):
            state.ingest([(np.zeros(3), np.zeros(1))])

    def test_ingest_is_associative(self):
        rng = np.random.default_rng(21)
        noise = GaussianMixtureNoise(np.full(3, 0.5))
        pairs = [(rng.standard_normal(5), rng.standard_normal(3)) for _ in range(12)]
        whole = PotentialState(5.0, np.zeros(15), noise, 2).ingest(pairs)
        split = PotentialState(5.0, np.zeros(15), noise, 2)
        split.ingest(pairs[:4]).ingest([]).ingest(pairs[4:9]).ingest(pairs[9:])
        np.testing.assert_array_equal(split.gram, whole.gram)
        np.testing.assert_array_equal(split._Z, whole._Z)
        np.testing.assert_array_equal(split._X, whole._X)
        assert split.t == whole.t == 13
        theta = rng.standard_normal(15)
        np.testing.assert_array_equal(split.grad_potential(theta), whole.grad_potential(theta))

    def test_gram_matches_recomputation(self):
        state = _random_state(np.random.default_rng(20), GaussianMixtureNoise(np.full(3, 0.5)), 2, 5.0, 100)
        assert np.linalg.norm(state.gram - state.recompute_gram()) <= 1e-10

    def test_gradient_hand_example(self):
        state = PotentialState(1.0, np.zeros(2), GaussianNoise.standard(1), 1)
        state.ingest([(np.array([1.0, 0.0]), np.array([2.0]))])
        np.testing.assert_allclose(state.grad_potential(np.zeros(2)), [-2.0, 0.0])

    @pytest.mark.parametrize('noise', _models()[:2], ids=lambda m: m.kind)
    def test_gradient_matches_potential(self, noise):
        rng = np.random.default_rng(21)
        state = _random_state(rng, noise, 2, 2.0, 30)
        for theta in rng.standard_normal((100, state.dn)):
            fd = _central_difference(lambda v: float(state.potential(v)), theta)
            np.testing.assert_allclose(state.grad_potential(theta), fd, rtol=1e-5, atol=1e-5)

    def test_batched_gradient(self):
        rng = np.random.default_rng(22)
        state = _random_state(rng, GaussianMixtureNoise(np.full(3, 0.5)), 3, 5.0, 12)
        batch = rng.standard_normal((6, state.dn))
        grads = state.grad_potential(batch)
        for theta, grad in zip(batch, grads):
            np.testing.assert_allclose(grad, state.grad_potential(theta), rtol=1e-12, atol=1e-12)
        assert state.potential(batch).shape == (6,)

    def test_gaussian_hessian_is_preconditioner(self):
        rng = np.random.default_rng(23)
        state = _random_state(rng, GaussianNoise.standard(3), 3, 5.0, 40)
        np.testing.assert_allclose(state.hessian_potential(rng.standard_normal(18)),
                                   state.dense_preconditioner(), atol=1e-10)
        empty = PotentialState(5.0, np.zeros(18), GaussianNoise.standard(3), 3)
        np.testing.assert_allclose(empty.hessian_potential(np.zeros(18)), 5.0 * np.eye(18))

    def test_hessian_matches_gradient(self):
        rng = np.random.default_rng(24)
        state = _random_state(rng, GaussianMixtureNoise(np.full(3, 0.5)), 2, 2.0, 25)
        theta = rng.standard_normal(state.dn)
        fd = np.column_stack([(state.grad_potential(theta + h) - state.grad_potential(theta - h)) / 2e-6
                              for h in 1e-6 * np.eye(state.dn)])
        np.testing.assert_allclose(state.hessian_potential(theta), fd, rtol=1e-4, atol=1e-4)

    def test_preconditioned_hessian_sandwich(self):
        rng = np.random.default_rng(25)
        noise = GaussianMixtureNoise(np.full(3, 0.5))
        for _ in range(50):
            state = _random_state(rng, noise, 3, 5.0, int(rng.integers(0, 80)))
            P = state.dense_preconditioner()
            for _ in range(20):
                eig = la.eigh(state.hessian_potential(3.0 * rng.standard_normal(18)), P, eigvals_only=True)
                assert eig[0] >= 0.25 - 1e-8
                assert eig[-1] <= 1.0 + 1e-8

    def test_newton_exact_for_quadratic(self):
        rng = np.random.default_rng(26)
        state = _random_state(rng, GaussianNoise.standard(2), 2, 3.0, 30)
        theta = state.newton_minimize(rng.standard_normal(state.dn), max_iter=1)
        assert np.linalg.norm(state.grad_potential(theta)) <= 1e-9
        np.testing.assert_allclose(theta, state.ridge_mean(), atol=1e-8)

    def test_newton_matches_gradient_descent(self):
        rng = np.random.default_rng(27)
        state = _random_state(rng, GaussianMixtureNoise(np.full(3, 0.5)), 2, 5.0, 50)
        theta = state.newton_minimize(tol=1e-10)
        assert np.linalg.norm(state.grad_potential(theta)) < 1e-8

        # Preconditioned gradient descent contracts by at least 1 - 1/4 per step
        oracle = state.prior_mean.copy()
        for _ in range(400):
            oracle = oracle - state.precond_apply(state.grad_potential(oracle), 'inverse')
        assert np.linalg.norm(state.grad_potential(oracle)) < 1e-10
        np.testing.assert_allclose(theta, oracle, atol=1e-6)

    def test_newton_budget(self):
        state = _random_state(np.random.default_rng(28), GaussianMixtureNoise(np.full(3, 0.5)), 2, 5.0, 50)
        with pytest.raises(NonConvergence):
            state.newton_minimize(np.full(state.dn, 50.0), tol=1e-14, max_iter=1)

    def test_spectrum_agrees_with_dense_eigensolve(self):
        state = _random_state(np.random.default_rng(29), GaussianNoise.standard(3), 2, 5.0, 17)
        dense = la.eigvalsh(state.dense_preconditioner())
        lo, hi = state.precond_spectrum()
        assert lo == pytest.approx(dense[0], abs=1e-9)
        assert hi == pytest.approx(dense[-1], abs=1e-9)

    def test_precond_apply(self):
        state = PotentialState(4.0, np.zeros(6), GaussianNoise.standard(2), 1)
        v = np.arange(6.0)
        np.testing.assert_allclose(state.precond_apply(v, 'inverse'), v / 4.0)
        np.testing.assert_allclose(state.precond_apply(v, 'inverse-sqrt'), v / 2.0)
        with pytest.raises(ValueError):
            state.precond_apply(v, 'sqrt')

        rng = np.random.default_rng(30)
        state = _random_state(rng, GaussianNoise.standard(3), 2, 5.0, 23)
        v = rng.standard_normal(state.dn)
        np.testing.assert_allclose(state.dense_preconditioner() @ state.precond_apply(v, 'inverse'), v,
                                   atol=1e-9)
        half = state.precond_apply(state.precond_apply(v, 'inverse-sqrt'), 'inverse-sqrt')
        np.testing.assert_allclose(half, state.precond_apply(v, 'inverse'), atol=1e-12)

    def test_ingest_invalidates_cached_operators(self):
        state = PotentialState(1.0, np.zeros(2), GaussianNoise.standard(1), 1)
        before = state.precond_apply(np.ones(2))
        state.ingest([(np.array([1.0, 0.0]), np.array([0.0]))])
        np.testing.assert_allclose(before, [1.0, 1.0])
        np.testing.assert_allclose(state.precond_apply(np.ones(2)), [0.5, 1.0])


# -----------------------------------------------------------------------
# Langevin sampler
# -----------------------------------------------------------------------


def _schedule(gamma, n_steps):
    return UlaSchedule(gamma=gamma, n_steps=n_steps, raw_n_steps=n_steps, lambda_min=1.0, t=1, m=1.0, M=1.0)


class TestSchedules:

    def test_preconditioned_schedule(self):
        schedule = step_schedule(4.0, 10, 1.0, 1.0)
        assert schedule.gamma == pytest.approx(0.025, rel=1e-12)
        assert schedule.raw_n_steps == 212 and schedule.n_steps == 212
        assert not schedule.floored

    def test_raw_count_zero_is_floored(self):
        schedule = step_schedule(5.0, 1, 1.0, 1.0)
        assert schedule.gamma == pytest.approx(1.0 / 16.0)
        assert schedule.raw_n_steps == 0
        assert schedule.n_steps == 16 and schedule.floored

    def test_small_positive_count_is_kept(self):
        # 0 < raw N < one relaxation time: the formula value is used as is
        schedule = step_schedule(10.0, 11, 1.0, 1.0)
        assert schedule.raw_n_steps == 10 and schedule.n_steps == 10
        assert math.ceil(1.0 / schedule.gamma) == 18
        assert not schedule.floored

    def test_large_curvature_ratio(self):
        schedule = step_schedule(9.0, 100, 1.0, 10.0)
        assert schedule.gamma == pytest.approx(9.0 / 160000.0, rel=1e-12)
        # Direct evaluation of ceil(4 log2(100/9) / gamma)
        assert schedule.n_steps == math.ceil(4.0 * math.log2(100.0 / 9.0) / (9.0 / 160000.0))
        assert schedule.n_steps == 247036

    def test_formula_invariants(self):
        rng = np.random.default_rng(40)
        for _ in range(100):
            lam, t = rng.uniform(1, 50), int(rng.integers(1, 5000))
            m, M = sorted(rng.uniform(0.1, 10, size=2))
            schedule = step_schedule(lam, t, m, M)
            scale = max(lam, t)
            assert schedule.gamma * 16.0 * M ** 2 * scale == pytest.approx(m * lam, rel=1e-12)
            assert schedule.raw_n_steps == math.ceil(4.0 * math.log2(scale / lam) / (m * schedule.gamma))
            if schedule.raw_n_steps > 0:
                assert schedule.n_steps == schedule.raw_n_steps and not schedule.floored
            else:
                assert schedule.n_steps == math.ceil(1.0 / (m * schedule.gamma))

    @pytest.mark.parametrize('lo, hi, gamma, n_steps', [
        (1.0, 1.0, 1.0 / 16.0, 64),
        (4.0, 40.0, 4.0 / 25600.0, 6400),
        (1.0, 1000.0, 1.0 / 16e6, 64_000_000),
    ])
    def test_naive_schedule(self, lo, hi, gamma, n_steps):
        g, n = naive_schedule(lo, hi)
        assert g == pytest.approx(gamma, rel=1e-12)
        assert n == n_steps

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            step_schedule(0.0, 1, 1.0, 1.0)
        with pytest.raises(ValueError):
            naive_schedule(2.0, 1.0)


class TestUlaChain:

    def setup_method(self):
        # U(theta) = |theta|^2 / 2 with P = I
        self.state = PotentialState(1.0, np.zeros(8), GaussianNoise.standard(2), 2)

    def test_zero_steps_returns_start(self):
        theta0 = np.arange(8.0)
        np.testing.assert_array_equal(ula_chain(self.state, theta0, _schedule(0.1, 0),
                                                np.random.default_rng(0)), theta0)

    def test_stationary_variance_batched(self):
        gamma = 0.025
        draws = ula_chain(self.state, np.zeros((20_000, 8)), _schedule(gamma, 400), np.random.default_rng(41))
        assert draws.shape == (20_000, 8)
        assert draws.var() == pytest.approx(1.0 / (1.0 - gamma / 2.0), rel=0.02)

    @pytest.mark.slow
    def test_stationary_variance_long_chain(self):
        gamma = 0.025
        rng = np.random.default_rng(42)
        theta = np.zeros(8)
        total, total_sq, count = 0.0, 0.0, 0
        theta = ula_chain(self.state, theta, _schedule(gamma, 1000), rng)
        # 10^6 steps in total, recorded every tenth step
        for _ in range(100_000):
            theta = ula_chain(self.state, theta, _schedule(gamma, 10), rng)
            total += theta.sum()
            total_sq += (theta ** 2).sum()
            count += theta.size
        variance = total_sq / count - (total / count) ** 2
        assert variance == pytest.approx(1.0 / (1.0 - gamma / 2.0), rel=0.02)

    def test_conjugate_posterior_oracle(self):
        rng = np.random.default_rng(43)
        state = PotentialState(1.0, np.zeros(2), GaussianNoise.standard(1), 1)
        truth = np.array([0.7, -0.4])
        batch = []
        for _ in range(200):
            z = rng.standard_normal(2)
            batch.append((z, np.array([truth @ z + rng.standard_normal()])))
        state.ingest(batch)

        mean = state.ridge_mean()
        cov = la.inv(state.dense_preconditioner())
        lambda_min, _ = state.precond_spectrum()
        schedule = step_schedule(lambda_min, state.t, 1.0, 1.0)
        schedule = dataclasses.replace(schedule, n_steps=5 * math.ceil(1.0 / schedule.gamma))
        draws = ula_chain(state, np.tile(state.newton_minimize(), (4096, 1)), schedule, rng)

        se = np.sqrt(np.diag(cov) / 4096)
        assert np.all(np.abs(draws.mean(axis=0) - mean) < 3.0 * se)
        empirical = np.cov(draws, rowvar=False)
        assert np.linalg.norm(empirical - cov) <= 0.15 * np.linalg.norm(cov)

    def test_blowup(self):
        with pytest.raises(NumericalBlowup) as info:
            ula_chain(self.state, np.ones(8), _schedule(10.0, 100), np.random.default_rng(44))
        assert info.value.step < 100

    def test_determinism(self):
        runs = [ula_chain(self.state, np.zeros(8), _schedule(0.05, 50), np.random.default_rng(45))
                for _ in range(2)]
        np.testing.assert_array_equal(*runs)


class TestRejectionSampling:

    def setup_method(self):
        self.system = SystemParams(0.5 * np.eye(2), np.eye(2))
        self.cost = _default_cost(2, 2)
        self.state = PotentialState(100.0, self.system.theta, GaussianNoise.standard(2), 2)

    def test_vacuous_set_accepts_first_attempt(self):
        admissible = AdmissibleSet(1e9, 0.9999, 1e12, self.cost)
        schedule = step_schedule(100.0, 1, 1.0, 1.0)
        outcome = sample_with_rejection(self.state, self.system.theta, schedule, admissible, np.eye(2),
                                        np.random.default_rng(50))
        assert outcome.attempts == 1
        assert outcome.total_ula_steps == schedule.n_steps
        assert outcome.membership.admitted
        assert outcome.theta_tilde.shape == (8,)

    def test_exhaustion(self):
        admissible = AdmissibleSet(1e-3, 0.99, 1e12, self.cost)
        with pytest.raises(RejectionExhausted) as info:
            sample_with_rejection(self.state, self.system.theta, step_schedule(100.0, 1, 1.0, 1.0),
                                  admissible, np.eye(2), np.random.default_rng(51), max_attempts=3)
        assert info.value.attempts == 3
        assert info.value.clauses == {'norm': 3}

    def test_riccati_budget_applies_to_membership(self):
        admissible = AdmissibleSet(1e9, 0.9999, 1e12, self.cost)
        schedule = step_schedule(100.0, 1, 1.0, 1.0)
        accepted = sample_with_rejection(self.state, self.system.theta, schedule, admissible, np.eye(2),
                                         np.random.default_rng(53), max_attempts=2)
        assert accepted.attempts == 1
        with pytest.raises(RejectionExhausted) as info:
            sample_with_rejection(self.state, self.system.theta, schedule, admissible, np.eye(2),
                                  np.random.default_rng(53), max_attempts=2, riccati_max_iter=1)
        assert info.value.clauses == {'riccati': 2}

    def test_flooring_makes_attempts_differ(self):
        schedule = step_schedule(100.0, 1, 1.0, 1.0)
        assert schedule.raw_n_steps == 0 and schedule.n_steps >= 1
        rng = np.random.default_rng(52)
        first = ula_chain(self.state, self.system.theta, schedule, rng)
        second = ula_chain(self.state, self.system.theta, schedule, rng)
        assert not np.array_equal(first, second)


# -----------------------------------------------------------------------
# Simulator
# -----------------------------------------------------------------------


class TestEpisodes:

    @pytest.mark.parametrize('k, start, length', [(1, 1, 2), (2, 3, 3), (3, 6, 4)])
    def test_schedule(self, k, start, length):
        schedule = episode_schedule(k)
        assert (schedule.t_start, schedule.length) == (start, length)

    def test_schedule_closure(self):
        for k in range(1, 101):
            current, following = episode_schedule(k), episode_schedule(k + 1)
            assert following.t_start == current.t_start + current.length
            assert current.t_start == k * (k + 1) // 2

    def test_excitation_only_at_last_step(self):
        spec = ExcitationSpec.isotropic(3)
        schedule = episode_schedule(3)
        rng = np.random.default_rng(60)
        for t in (6, 7, 8):
            np.testing.assert_array_equal(excitation(spec, t, schedule, rng), np.zeros(3))
        assert np.any(excitation(spec, 9, schedule, rng) != 0)
        np.testing.assert_allclose(spec.covariance, 1e-4 * np.eye(3))

    def test_matched_excitation(self):
        W = GaussianMixtureNoise(np.full(3, 0.5)).W
        eig = la.eigvalsh(ExcitationSpec.matched(W, 3).covariance)
        expected = la.eigvalsh(W)
        assert eig[0] == pytest.approx(expected[0])
        assert eig[-1] == pytest.approx(expected[-1])

    def test_excitation_covariance_validation(self):
        with pytest.raises(InvalidModel):
            ExcitationSpec(np.array([[1.0, 0.0], [0.0, -1.0]]))


class TestSimulation:

    @pytest.fixture(scope='class')
    def record(self):
        system = _preset_system('paper-3x3')
        return run_tsld(_simulation(system, GaussianMixtureNoise(np.full(3, 0.5)), horizon=21),
                        np.random.default_rng(70), seed=70)

    def test_first_step_regret(self):
        system = _preset_system('paper-3x3')
        noise = GaussianMixtureNoise(np.full(3, 0.5))
        record = run_tsld(_simulation(system, noise, horizon=1), np.random.default_rng(71))
        assert record.horizon == 1
        row = record.rows[0]
        np.testing.assert_array_equal(row.x, np.zeros(3))
        assert row.cost == 0.0
        assert row.regret == pytest.approx(-record.J_star)

    def test_record_layout(self, record):
        assert record.horizon == 21
        assert [row.t for row in record.rows] == list(range(1, 22))
        assert [ep.t_start for ep in record.episodes] == [1, 3, 6, 10, 15, 21]
        assert sum(ep.length for ep in record.episodes) == 21
        assert record.episodes[-1].length == 1

    def test_excitation_sparsity(self, record):
        completed = sum(1 for ep in record.episodes if ep.length == ep.k + 1)
        assert record.excitation_count == completed == 5

    def test_lambda_min_nondecreasing(self, record):
        lam = [ep.lambda_min for ep in record.episodes]
        assert all(b >= a - 1e-12 for a, b in zip(lam, lam[1:]))
        assert lam[0] == pytest.approx(5.0)

    def test_counts(self, record):
        for ep in record.episodes:
            assert ep.attempts >= 1
            assert ep.ula_steps >= ep.attempts
            assert ep.naive_steps >= ep.attempts * 64

    def test_preconditioned_steps_never_exceed_naive(self, record):
        m, M = GaussianMixtureNoise(np.full(3, 0.5)).hessian_bounds()
        for ep in record.episodes:
            assert ep.ula_steps <= ep.naive_steps
            per_attempt = step_schedule(ep.lambda_min, ep.t_start, m, M).n_steps
            assert per_attempt <= naive_schedule(m * ep.lambda_min, M * ep.lambda_max)[1]

    def test_regret_series_recomputation(self, record):
        series = regret_series(record, record.J_star)
        np.testing.assert_allclose(series.cum_regret, record.cum_regret, rtol=0, atol=1e-9)
        costs = [row.x @ (2.0 * row.x) + row.u @ row.u for row in record.rows]
        np.testing.assert_allclose(np.cumsum(np.array(costs) - record.J_star), record.cum_regret,
                                   rtol=1e-12, atol=1e-9)
        np.testing.assert_allclose(series.normalized, series.cum_regret / np.sqrt(series.t))

    def test_regret_series_edge_cases(self):
        empty = RunRecord(algorithm='tsld', seed=0, J_star=1.0, theta_star=np.zeros(2))
        assert regret_series(empty, 1.0).cum_regret.size == 0

    def test_determinism(self, record):
        system = _preset_system('paper-3x3')
        again = run_tsld(_simulation(system, GaussianMixtureNoise(np.full(3, 0.5)), horizon=21),
                         np.random.default_rng(70), seed=70)
        np.testing.assert_array_equal(again.cum_regret, record.cum_regret)

    def test_riccati_settings_reach_the_admissibility_gate(self, monkeypatch):
        seen = set()

        def recording(theta, admissible, W, tol, max_iter):
            seen.add((tol, max_iter))
            return in_admissible_set(theta, admissible, W, tol=tol, max_iter=max_iter)

        monkeypatch.setattr(langevin_module, 'in_admissible_set', recording)
        monkeypatch.setattr(simulator_module, 'in_admissible_set', recording)
        system = _preset_system('paper-3x3')
        cfg = _simulation(system, GaussianNoise.standard(3), horizon=3, riccati_tol=1e-9, riccati_max_iter=5000)
        for runner in (run_tsld, run_psrl_baseline):
            seen.clear()
            runner(cfg, np.random.default_rng(73))
            assert seen == {(1e-9, 5000)}

    def test_state_blowup(self):
        system = _preset_system('paper-3x3')
        cfg = _simulation(system, GaussianNoise.standard(3), horizon=5, state_limit=1e-6)
        with pytest.raises(StateBlowup) as info:
            run_tsld(cfg, np.random.default_rng(72))
        assert info.value.t == 1

    def test_dimension_validation(self):
        with pytest.raises(InvalidModel):
            _simulation(_preset_system('paper-3x3'), GaussianNoise.standard(2), horizon=5)

    def test_psrl_baseline(self):
        system = _preset_system('paper-3x3')
        record = run_psrl_baseline(_simulation(system, GaussianNoise.standard(3), horizon=21),
                                   np.random.default_rng(73), seed=73)
        assert record.algorithm == 'psrl'
        assert record.horizon == 21
        assert all(ep.ula_steps == 0 for ep in record.episodes)

    def test_psrl_first_draw_comes_from_the_prior(self):
        system = SystemParams(np.array([[0.5]]), np.array([[1.0]]))
        cost = _default_cost(1, 1)
        cfg = _simulation(system, GaussianNoise.standard(1), horizon=1, lam=100.0, prior_mean=0.3,
                          admissible=AdmissibleSet(1e9, 0.9999, 1e12, cost))
        records = [run_psrl_baseline(cfg, np.random.default_rng(seed), seed=seed) for seed in range(1000)]
        assert all(r.episodes[0].attempts == 1 for r in records)
        draws = np.array([r.episodes[0].theta_tilde for r in records])
        # Prior-only posterior: N(0.3, I / 100)
        np.testing.assert_array_less(np.abs(draws.mean(axis=0) - 0.3), 4.0 * 0.1 / np.sqrt(1000))
        np.testing.assert_allclose(draws.var(axis=0, ddof=1), 0.01, rtol=0.2)

    def test_common_random_numbers(self):
        # TSLD and PSRL with the same seed see the same first process-noise draw
        system = _preset_system('paper-3x3')
        cfg = _simulation(system, GaussianNoise.standard(3), horizon=2)
        tsld = run_tsld(cfg, np.random.default_rng(74))
        psrl = run_psrl_baseline(cfg, np.random.default_rng(74))
        np.testing.assert_array_equal(tsld.rows[1].x, psrl.rows[1].x)
