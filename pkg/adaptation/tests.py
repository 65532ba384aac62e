import numpy as np
import pandas as pd
from django.conf import settings
from django.test import SimpleTestCase, tag

from integrators.services.dynamics import ChainState, full_refresh, init_state
from integrators.services.schemes import LEAPFROG, MINIMAL_NORM_2, MINIMAL_NORM_4
from kernels.services.kernels import (
    PARTIAL_REFRESH_FACTOR,
    AdjustedKernelConfig,
    UnadjustedKernelConfig,
    mams_kernel,
    unadjusted_kernel,
)
from targets.services.builtins import banana_target, ill_conditioned_gaussian, random_rotation, standard_gaussian
from diagnostics.services.bias import grads_to_threshold
from diagnostics.services.records import Phase
from harness.services.traces import records_frame

from .services.bisection import BisectionError, SearchStage, StepSizeBisection, bisection_tune
from .services.ensemble import (
    ChainExecutor,
    EnsembleError,
    EnsembleState,
    chain_stream,
    chain_streams,
    ensemble_expectation,
    ensemble_variance,
    probe_stream,
)
from .services.equipartition import (
    all_sign_probes,
    equipartition_diag,
    equipartition_full,
    equipartition_matrix,
    gaussian_equipartition,
    gaussian_equipartition_diag,
)
from .services.laps import AdaptationConfig, EquipartitionMode, laps_run
from .services.preconditioning import SCALE_FLOOR, Preconditioner, precondition
from .services.schedule import (
    FluctuationMonitor,
    bias_bound,
    bias_bound_inverse,
    decoherence_update,
    desired_eevpd,
    eevpd,
    step_size_update,
)


def random_spd(d, rng, low=0.5, high=2.0):
    q = random_rotation(d, rng)
    return (q * rng.uniform(low, high, size=d)) @ q.T


def exact_moment_samples(cov, m, rng):
    """m points whose mean is zero and whose population covariance (divisor m) is exactly `cov`."""
    d = cov.shape[0]
    z = rng.standard_normal((m, d))
    z -= z.mean(axis=0)
    whiten = np.linalg.cholesky(z.T @ z / m)
    z = np.linalg.solve(whiten, z.T).T
    return z @ np.linalg.cholesky(cov).T


def gaussian_gradients(x, cov):
    return -np.linalg.solve(cov, x.T).T


class EnsembleReductionTests(SimpleTestCase):
    def test_mean_and_unbiased_variance(self):
        self.assertEqual(ensemble_expectation([1.0, 3.0]), 2.0)
        self.assertEqual(ensemble_variance([1.0, 3.0]), 2.0)
        self.assertEqual(ensemble_variance([4.0, 4.0, 4.0]), 0.0)

    def test_mean_of_many_normals(self):
        values = np.random.default_rng(0).standard_normal(100_000)
        self.assertLess(abs(ensemble_expectation(values)), 0.02)

    def test_non_finite_values_are_excluded(self):
        with self.assertLogs("adaptation.services.ensemble", level="WARNING") as logs:
            mean = ensemble_expectation([1.0, np.nan, 3.0, np.inf])
        self.assertEqual(mean, 2.0)
        self.assertIn("excluded 2", logs.output[0])

    def test_rows_with_any_non_finite_entry_are_excluded(self):
        with self.assertLogs("adaptation.services.ensemble", level="WARNING"):
            mean = ensemble_expectation(np.array([[1.0, 1.0], [np.nan, 5.0], [3.0, 3.0]]))
        np.testing.assert_array_equal(mean, [2.0, 2.0])

    def test_all_non_finite(self):
        with self.assertRaises(EnsembleError):
            ensemble_expectation([np.nan, np.inf])


class StreamTests(SimpleTestCase):
    def test_chain_streams_are_reproducible_and_distinct(self):
        a = chain_stream(7, 3).standard_normal(5)
        b = chain_stream(7, 3).standard_normal(5)
        c = chain_stream(7, 4).standard_normal(5)
        d = chain_stream(8, 3).standard_normal(5)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.allclose(a, c))
        self.assertFalse(np.allclose(a, d))

    def test_stream_does_not_depend_on_ensemble_size(self):
        small = chain_streams(1, 4)[2].random(3)
        large = chain_streams(1, 4096)[2].random(3)
        np.testing.assert_array_equal(small, large)

    def test_probe_stream_is_separate(self):
        p = probe_stream(0, 1).random(4)
        np.testing.assert_array_equal(p, probe_stream(0, 1).random(4))
        self.assertFalse(np.allclose(p, probe_stream(0, 2).random(4)))
        self.assertFalse(np.allclose(p, chain_stream(0, 1).random(4)))


class ChainExecutorTests(SimpleTestCase):
    def test_blocks_do_not_depend_on_workers(self):
        one = ChainExecutor(workers=1, block_size=256).blocks(600)
        many = ChainExecutor(workers=8, block_size=256).blocks(600)
        self.assertEqual(one, many)
        self.assertEqual(one, [slice(0, 256), slice(256, 512), slice(512, 600)])

    def test_map_keeps_block_order(self):
        state = ChainState(np.arange(20.0).reshape(10, 2), np.zeros((10, 2)), np.zeros(10), np.zeros((10, 2)))
        streams = chain_streams(0, 10)
        with ChainExecutor(workers=4, block_size=3) as executor:
            parts = executor.map(lambda block, rngs: block.x[:, 0].copy(), state, streams)
        np.testing.assert_array_equal(np.concatenate(parts), state.x[:, 0])

    def test_ensemble_needs_two_chains(self):
        state = ChainState(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros(1), np.zeros((1, 2)))
        with self.assertRaises(EnsembleError):
            EnsembleState(state, chain_streams(0, 1))


class EquipartitionTests(SimpleTestCase):
    def test_closed_forms_for_gaussian_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            d = int(rng.integers(2, 11))
            sigma, sigma_prime = random_spd(d, rng), random_spd(d, rng)
            x = exact_moment_samples(sigma_prime, 200, rng)
            g = gaussian_gradients(x, sigma)

            np.testing.assert_allclose(equipartition_matrix(x, g), sigma_prime @ np.linalg.inv(sigma), atol=1e-10)
            full = equipartition_full(x, g, probe_vectors=all_sign_probes(d))
            self.assertAlmostEqual(full, gaussian_equipartition(sigma, sigma_prime), delta=1e-10 * max(1.0, full))

    def test_diagonal_closed_form_for_gaussian_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            d = int(rng.integers(2, 11))
            sigma, sigma_prime = random_spd(d, rng), random_spd(d, rng)
            x = exact_moment_samples(sigma_prime, 200, rng)
            diag = equipartition_diag(x, gaussian_gradients(x, sigma))
            expected = np.mean((1.0 - np.diag(sigma_prime @ np.linalg.inv(sigma))) ** 2)
            self.assertAlmostEqual(diag, gaussian_equipartition_diag(sigma, sigma_prime), delta=1e-10)
            self.assertAlmostEqual(diag, expected, delta=1e-10)

    def test_diagonal_closed_form_reduces_to_variance_ratios(self):
        sigma = np.diag([1.0, 4.0])
        sigma_prime = np.diag([2.0, 4.0])
        self.assertAlmostEqual(gaussian_equipartition_diag(sigma, sigma_prime), 0.5)

    def test_one_dimensional_example(self):
        x = exact_moment_samples(np.array([[2.0]]), 100, np.random.default_rng(2))
        self.assertAlmostEqual(equipartition_diag(x, -x), 1.0, places=10)

    def test_two_dimensional_example(self):
        x = exact_moment_samples(np.diag([2.0, 1.0]), 100, np.random.default_rng(3))
        full = equipartition_full(x, -x, probe_vectors=all_sign_probes(2))
        self.assertAlmostEqual(full, 0.5, places=10)
        self.assertAlmostEqual(gaussian_equipartition(np.eye(2), np.diag([2.0, 1.0])), 0.5)

    def test_zero_exactly_when_covariances_match(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            d = int(rng.integers(2, 11))
            sigma = random_spd(d, rng)
            x = exact_moment_samples(sigma, 100, rng)
            g = gaussian_gradients(x, sigma)
            self.assertLess(equipartition_full(x, g, probe_vectors=all_sign_probes(d)), 1e-18)
            other = random_spd(d, rng)
            self.assertGreater(equipartition_full(x, gaussian_gradients(x, other), probe_vectors=all_sign_probes(d)), 1e-6)

    def test_exact_samples_have_small_diagonal_loss(self):
        target, _, _ = standard_gaussian(5)
        x = target.exact_sampler(np.random.default_rng(5), 100_000)
        self.assertLess(equipartition_diag(x, target.gradient(x)), 1e-3)

    def test_hutchinson_on_doubled_covariance(self):
        for d in (5, 20):
            target, _, _ = ill_conditioned_gaussian(d, seed=d, target_condition=100.0)
            cov = target.extras["covariance"]
            x = exact_moment_samples(2.0 * cov, 2000, np.random.default_rng(6))
            g = target.gradient(x)
            estimate = equipartition_full(x, g, probes=100, rng=np.random.default_rng(7))
            self.assertAlmostEqual(estimate, gaussian_equipartition(cov, 2.0 * cov), delta=0.01)
            self.assertAlmostEqual(estimate, 1.0, delta=0.01)

    def test_hutchinson_is_unbiased(self):
        rng = np.random.default_rng(8)
        d = 12
        sigma, sigma_prime = random_spd(d, rng), random_spd(d, rng, 0.2, 4.0)
        x = rng.standard_normal((2000, d)) @ np.linalg.cholesky(sigma_prime).T
        g = gaussian_gradients(x, sigma)
        dense = np.sum((np.eye(d) - equipartition_matrix(x, g)) ** 2) / d
        estimates = np.array([equipartition_full(x, g, probes=5, rng=probe_stream(9, t)) for t in range(200)])
        se = estimates.std(ddof=1) / np.sqrt(len(estimates))
        self.assertLess(abs(estimates.mean() - dense), 3 * se)

    def test_full_needs_probes(self):
        x = np.random.default_rng(0).standard_normal((10, 3))
        with self.assertRaises(ValueError):
            equipartition_full(x, -x)


class EevpdTests(SimpleTestCase):
    def test_examples(self):
        self.assertEqual(eevpd([0.3, 0.3, 0.3], 4), 0.0)
        self.assertEqual(eevpd([0.0, 2.0], 2), 1.0)

    def test_divergent_chains(self):
        self.assertEqual(eevpd([0.0, 2.0, 50.0], 2, divergent=np.array([False, False, True])), 1.0)
        self.assertEqual(eevpd([0.0, np.inf, np.inf], 2), np.inf)

    def test_needs_two_chains(self):
        with self.assertRaises(EnsembleError):
            eevpd([1.0], 2)

    def energy_variance(self, scheme, eps, state, target):
        cfg = UnadjustedKernelConfig(eps, 1e6, scheme)
        result = unadjusted_kernel(state, cfg, target, chain_streams(3, state.size))
        return eevpd(result.energy_change, target.dimension, result.divergent)

    def test_sixth_power_scaling(self):
        target, _, _ = standard_gaussian(100)
        x = target.exact_sampler(np.random.default_rng(0), 1024)
        state, _ = init_state(x, np.zeros_like(x), target)
        state.u = full_refresh(state, chain_streams(1, 1024)).u
        for scheme in (LEAPFROG, MINIMAL_NORM_2):
            for eps in (0.5, 1.0, 2.0):
                ratio = self.energy_variance(scheme, 2 * eps, state, target) / self.energy_variance(scheme, eps, state, target)
                self.assertLess(abs(np.log2(ratio) - 6.0), 1.8, msg=f"{scheme.name} eps={eps}")
        for eps in (0.5, 1.0, 2.0):
            self.assertLess(
                self.energy_variance(MINIMAL_NORM_4, eps, state, target),
                self.energy_variance(MINIMAL_NORM_2, eps, state, target),
            )


class BiasBoundTests(SimpleTestCase):
    def test_values(self):
        self.assertEqual(bias_bound(0.0), 0.0)
        self.assertAlmostEqual(bias_bound(1.0), 1.0)
        self.assertLess(bias_bound(0.5), bias_bound(0.6))

    def test_inverse_round_trip(self):
        for x in (1e-6, 1e-3, 1.0, 10.0):
            self.assertAlmostEqual(bias_bound_inverse(bias_bound(x)) / x, 1.0, delta=1e-9)
        self.assertEqual(bias_bound_inverse(0.0), 0.0)

    def test_negative_input(self):
        with self.assertRaises(EnsembleError):
            bias_bound(-0.1)
        with self.assertRaises(EnsembleError):
            bias_bound_inverse(-1.0)


class StepSizeUpdateTests(SimpleTestCase):
    def setUp(self):
        self.D = 1.0
        self.wanted = desired_eevpd(self.D, 0.025)

    def test_too_large_energy_error_halves(self):
        self.assertAlmostEqual(step_size_update(0.8, self.D, 64 * self.wanted), 0.4)

    def test_fixed_point(self):
        self.assertAlmostEqual(step_size_update(0.8, self.D, self.wanted), 0.8)

    def test_growth_is_clamped(self):
        self.assertAlmostEqual(step_size_update(0.8, self.D, self.wanted / 1e9), 2.4)

    def test_shrink_is_clamped(self):
        self.assertAlmostEqual(step_size_update(0.8, self.D, self.wanted * 1e9), 0.24)

    def test_infinite_sentinel_halves(self):
        self.assertEqual(step_size_update(0.8, self.D, np.inf), 0.4)

    def test_zero_observation(self):
        self.assertEqual(step_size_update(0.8, 0.0, 0.0), 0.8)
        self.assertAlmostEqual(step_size_update(0.8, self.D, 0.0), 2.4)


class DecoherenceTests(SimpleTestCase):
    def test_standard_normal_ensemble(self):
        x = np.random.default_rng(0).standard_normal((20_000, 100))
        self.assertAlmostEqual(decoherence_update(x, 2.0, 1.0), 20.0, delta=0.2)

    def test_collapsed_ensemble_keeps_previous(self):
        x = np.ones((10, 3))
        self.assertEqual(decoherence_update(x, 2.0, 7.5), 7.5)


class FluctuationMonitorTests(SimpleTestCase):
    def test_undefined_before_window(self):
        monitor = FluctuationMonitor(dimension=2, window=10)
        for _ in range(9):
            self.assertEqual(monitor.observe(np.array([1.0, 2.0])), np.inf)
        self.assertEqual(monitor.observe(np.array([1.0, 2.0])), 0.0)

    def test_alternating_means(self):
        monitor = FluctuationMonitor(dimension=1, window=1000)
        a = 3.0
        for k in range(20_000):
            delta = monitor.observe(np.array([a if k % 2 == 0 else 3 * a]))
        self.assertAlmostEqual(monitor.mean[0], 2 * a, delta=0.01 * a)
        self.assertAlmostEqual(delta, 0.5, delta=0.05)

    def test_zero_mean_coordinate_is_infinite(self):
        monitor = FluctuationMonitor(dimension=2, window=1)
        self.assertEqual(monitor.observe(np.array([0.0, 1.0])), np.inf)

    def test_window_from_run_length(self):
        self.assertEqual(FluctuationMonitor.for_run(3, 1000, 0.2).window, 200)

    def test_update_uses_second_moments(self):
        monitor = FluctuationMonitor(dimension=2, window=1)
        monitor.update(np.array([[1.0, 2.0], [3.0, 0.0]]))
        np.testing.assert_array_equal(monitor.mean, [5.0, 2.0])

    def test_burn_in_is_forgotten(self):
        monitor = FluctuationMonitor(dimension=1, window=10)
        for k in range(40):
            monitor.observe(np.array([100.0 / (k + 1)]))
        for _ in range(10):
            delta = monitor.observe(np.array([1.0]))
        self.assertEqual(delta, 0.0)

    def test_matches_window_statistics(self):
        rng = np.random.default_rng(4)
        series = 1.0 + np.cumsum(0.01 * rng.standard_normal((300, 3)), axis=0) ** 2
        monitor = FluctuationMonitor(dimension=3, window=60)
        for row in series:
            delta = monitor.observe(row)
        tail = series[-60:]
        expected = tail.std(axis=0, ddof=1) / tail.mean(axis=0)
        np.testing.assert_allclose(monitor.fluctuations, expected, rtol=1e-12)
        self.assertAlmostEqual(delta, expected.max(), places=12)


class PreconditionerTests(SimpleTestCase):
    def ensemble(self, x, target):
        state, _ = init_state(x, np.zeros_like(x), target)
        return full_refresh(state, chain_streams(0, x.shape[0]))

    def test_round_trip(self):
        pre = Preconditioner(np.array([0.1, 3.0, 1e4]))
        x = np.random.default_rng(0).standard_normal((5, 3))
        np.testing.assert_allclose(pre.to_original(pre.to_transformed(x)), x, rtol=1e-12, atol=1e-12)

    def test_isotropic_ensemble(self):
        target, _, _ = standard_gaussian(4)
        x = 3.0 * np.random.default_rng(1).standard_normal((5000, 4))
        x = x / x.std(axis=0, ddof=1) * 3.0
        _, pre, _ = precondition(self.ensemble(x, target), target)
        np.testing.assert_allclose(pre.scales, 3.0)

    def test_unit_variance_after_preconditioning(self):
        target, _, _ = ill_conditioned_gaussian(20, seed=0, target_condition=1e5)
        x = target.exact_sampler(np.random.default_rng(2), 4096)
        wrapped, pre, moved = precondition(self.ensemble(x, target), target)
        np.testing.assert_allclose(moved.x.var(axis=0, ddof=1), 1.0, rtol=1e-10)
        np.testing.assert_allclose(moved.gradient, wrapped.gradient(moved.x), rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(moved.log_density, wrapped.log_density(moved.x), rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(moved.u, axis=1), 1.0)

    def test_tiny_scales_are_floored(self):
        with self.assertLogs("adaptation.services.preconditioning", level="WARNING"):
            pre = Preconditioner(np.array([1.0, 0.0]))
        self.assertEqual(pre.scales[1], SCALE_FLOOR)


class BisectionTests(SimpleTestCase):
    def test_first_probe_within_tolerance(self):
        search = StepSizeBisection(0.5, 0.7, 0.03)
        self.assertEqual(search.observe(0.72), 0.5)
        self.assertTrue(search.frozen)
        self.assertEqual(len(search.history), 1)
        self.assertEqual(search.observe(0.1), 0.5)

    def test_bracket_then_bisect(self):
        search = StepSizeBisection(1.0, 0.7, 0.03)
        self.assertEqual(search.observe(0.9), 2.0)
        self.assertEqual(search.observe(0.5), 1.5)
        self.assertIs(search.stage, SearchStage.BISECTING)
        self.assertEqual(search.observe(0.6), 1.25)
        self.assertEqual((search.lo.step_size, search.hi.step_size), (1.0, 1.5))
        self.assertEqual(search.observe(0.8), 1.375)
        self.assertEqual((search.lo.step_size, search.hi.step_size), (1.25, 1.5))
        search.observe(0.71)
        self.assertTrue(search.frozen)
        self.assertEqual(search.step_size, 1.375)

    def test_halves_when_acceptance_is_low(self):
        search = StepSizeBisection(4.0, 0.7, 0.03)
        self.assertEqual(search.observe(0.1), 2.0)
        self.assertEqual(search.observe(0.3), 1.0)
        self.assertEqual(search.observe(0.95), 1.5)

    def test_no_bracket(self):
        with self.assertRaises(BisectionError):
            bisection_tune(lambda eps: 1.0, 0.1, 0.7)

    def test_smooth_acceptance_curve(self):
        probes = []

        def acceptance(eps):
            probes.append(eps)
            return float(np.exp(-eps))

        eps = bisection_tune(acceptance, 0.01, 0.7, 0.03)
        self.assertLessEqual(abs(np.exp(-eps) - 0.7), 0.03)
        self.assertLessEqual(len(probes), 15)

    def test_gives_up_on_a_jump(self):
        with self.assertLogs("adaptation.services.bisection", level="WARNING"):
            eps = bisection_tune(lambda e: 0.9 if e < 1.0 else 0.5, 0.5, 0.7, 0.03)
        self.assertAlmostEqual(eps, 1.0, places=6)

    @tag("slow")
    def test_acceptance_after_bisection_on_gaussian(self):
        target, _, _ = standard_gaussian(2)
        chains = 512
        x = target.exact_sampler(np.random.default_rng(5), chains)
        state, _ = init_state(x, np.zeros_like(x), target)
        rngs = chain_streams(11, chains)
        cfg = AdjustedKernelConfig.for_step_size(0.5, MINIMAL_NORM_2)
        self.assertEqual(cfg.target_acceptance, 0.7)

        search = StepSizeBisection(cfg.step_size, cfg.target_acceptance, 0.03)
        while not search.frozen:
            outcome = mams_kernel(state, cfg, target, rngs)
            state = outcome.state
            cfg = cfg.with_step_size(search.observe(float(np.mean(outcome.accepted))), PARTIAL_REFRESH_FACTOR)
        self.assertAlmostEqual(search.history[-1].acceptance, 0.7, delta=0.03)

        rates = []
        for _ in range(200):
            outcome = mams_kernel(state, cfg, target, rngs)
            state = outcome.state
            rates.append(np.mean(outcome.accepted))
        # the freezing round saw a(eps) through one round of noise, sqrt(a (1 - a) / M)
        self.assertAlmostEqual(np.mean(rates), 0.7, delta=0.03 + 3 * np.sqrt(0.21 / chains))


class AdaptationConfigTests(SimpleTestCase):
    def test_defaults_from_settings(self):
        cfg = AdaptationConfig.from_settings()
        self.assertEqual(cfg.C, settings.LAPS_C)
        self.assertEqual(cfg.alpha, settings.LAPS_ALPHA)
        self.assertEqual(cfg.maxiter, settings.LAPS_MAXITER)
        self.assertEqual(cfg.step_change_clamp, (0.3, 3.0))
        self.assertIs(cfg.equipartition_mode, EquipartitionMode.DIAGONAL)

    def test_overrides_skip_none(self):
        cfg = AdaptationConfig.from_settings(alpha=3.0, C=None, equipartition_mode="full")
        self.assertEqual(cfg.alpha, 3.0)
        self.assertEqual(cfg.C, settings.LAPS_C)
        self.assertIs(cfg.equipartition_mode, EquipartitionMode.FULL_RANK)

    def test_invalid_values(self):
        for bad in ({"C": 1.0}, {"window_fraction": 1.0}, {"fluctuation_threshold": 0.0},
                    {"target_acceptance": 1.2}, {"equipartition_mode": "sparse"},
                    {"unadjusted_integrator": "rk4"}):
            with self.assertRaises(Exception, msg=str(bad)):
                AdaptationConfig(**bad)

    def test_adjusted_scheme_choice(self):
        self.assertIs(AdaptationConfig().adjusted_scheme(100), MINIMAL_NORM_2)
        self.assertIs(AdaptationConfig().adjusted_scheme(300), MINIMAL_NORM_4)
        self.assertIs(AdaptationConfig(adjusted_integrator="mn4").adjusted_scheme(10), MINIMAL_NORM_4)


class LapsRunTests(SimpleTestCase):
    def run_banana(self, chains=256, seed=1, workers=1, **overrides):
        target, truth, init = banana_target()
        cfg = AdaptationConfig(**{"maxiter": 80, "block_size": 64, **overrides})
        return laps_run(target, init, chains, cfg, seed, workers=workers, ground_truth=truth)

    def test_record_sequence(self):
        result = self.run_banana()
        records = result.records
        self.assertEqual([r.iteration for r in records], list(range(1, len(records) + 1)))
        grads = [r.gradient_calls_per_chain for r in records]
        self.assertTrue(all(b >= a for a, b in zip(grads, grads[1:])))
        phases = [r.phase for r in records]
        switch = result.switch_iteration
        self.assertTrue(all(p is Phase.UNADJUSTED for p in phases[:switch]))
        self.assertTrue(all(p is Phase.ADJUSTED for p in phases[switch:]))
        self.assertGreaterEqual(switch, 16)
        self.assertIsNotNone(records[-1].acceptance)
        self.assertTrue(all(r.bias is not None for r in records))
        self.assertEqual(records[0].gradient_calls_per_chain, 2)

    def test_same_result_for_any_worker_count(self):
        one = self.run_banana(chains=300, workers=1, equipartition_mode="full", hutchinson_probes=10, maxiter=50)
        four = self.run_banana(chains=300, workers=4, equipartition_mode="full", hutchinson_probes=10, maxiter=50)
        pd.testing.assert_frame_equal(records_frame(one.records), records_frame(four.records))
        np.testing.assert_array_equal(one.positions, four.positions)

    def test_different_seeds_differ(self):
        a = self.run_banana(seed=1, maxiter=10, adjusted=False)
        b = self.run_banana(seed=2, maxiter=10, adjusted=False)
        self.assertNotEqual(a.records[-1].b2_max, b.records[-1].b2_max)

    def test_frozen_phase_reads_no_ensemble_statistics(self):
        short = self.run_banana(switch_after=20, maxiter=60)
        long = self.run_banana(switch_after=20, maxiter=90)
        self.assertEqual(len(short.records), 60)
        self.assertEqual(len(long.records), 90)
        self.assertEqual(short.ensemble.adaptation_reductions, long.ensemble.adaptation_reductions)
        self.assertEqual(short.adjusted_step_size, long.adjusted_step_size)

    def test_without_preconditioning(self):
        plain = self.run_banana(switch_after=20, maxiter=40, preconditioning=False)
        scaled = self.run_banana(switch_after=20, maxiter=40)
        np.testing.assert_array_equal(plain.preconditioner.scales, np.ones(2))
        self.assertFalse(np.allclose(scaled.preconditioner.scales, 1.0))
        np.testing.assert_array_equal(plain.positions, plain.ensemble.chains.x)

    def test_trajectory_length_settings(self):
        result = self.run_banana(switch_after=10, maxiter=14, steps_per_proposal=4, partial_refresh_factor=2.0)
        adjusted = [r for r in result.records if r.phase is Phase.ADJUSTED]
        self.assertTrue(adjusted)
        grads = [result.records[9].gradient_calls_per_chain] + [r.gradient_calls_per_chain for r in adjusted]
        self.assertEqual(set(np.diff(grads)), {4 * MINIMAL_NORM_2.gradients_per_step})
        for r in adjusted:
            self.assertAlmostEqual(r.decoherence, 2.0 * 4 * r.step_size)

    def test_unadjusted_only(self):
        result = self.run_banana(maxiter=30, adjusted=False)
        self.assertEqual(len(result.records), 30)
        self.assertTrue(all(r.phase is Phase.UNADJUSTED for r in result.records))
        self.assertIsNone(result.switch_iteration)
        self.assertIsNone(result.adjusted_step_size)

    def test_adjusted_only(self):
        result = self.run_banana(maxiter=40, switch_after=0)
        self.assertEqual(result.switch_iteration, 0)
        self.assertIs(result.records[0].phase, Phase.ADJUSTED)

    def test_fixed_step_size(self):
        result = self.run_banana(maxiter=20, adjusted=False, fixed_step_size=0.3)
        self.assertTrue(all(r.step_size == 0.3 for r in result.records))

    def test_maxiter_in_first_phase_warns_and_tunes(self):
        with self.assertLogs("adaptation.services.laps", level="WARNING") as logs:
            result = self.run_banana(maxiter=5, window_fraction=0.9)
        self.assertTrue(any("maxiter" in line for line in logs.output))
        self.assertEqual(result.switch_iteration, 5)
        self.assertGreater(len(result.records), 5)
        self.assertIsNotNone(result.adjusted_step_size)

    def test_rejects_small_problems(self):
        target, truth, init = banana_target()
        with self.assertRaises(EnsembleError):
            laps_run(target, init, 1, AdaptationConfig(maxiter=5))

    @tag("slow")
    def test_banana_reaches_low_bias_quickly(self):
        for seed in (0, 1, 2):
            result = self.run_banana(chains=4096, seed=seed, maxiter=300, block_size=256, workers=0)
            grads = grads_to_threshold(result.records, 0.01, "max")
            self.assertIsNotNone(grads, msg=f"seed {seed}")
            self.assertLessEqual(grads, 100, msg=f"seed {seed}")

    @tag("slow")
    def test_ill_conditioned_gaussian(self):
        target, truth, init = ill_conditioned_gaussian(50, seed=0, target_condition=1e5)
        result = laps_run(target, init, 1024, AdaptationConfig(maxiter=600), seed=0, workers=0, ground_truth=truth)
        grads = grads_to_threshold(result.records, 0.01, "max")
        self.assertIsNotNone(grads)
        self.assertLessEqual(grads, 1500)
        self.assertIsNotNone(result.adjusted_step_size)
