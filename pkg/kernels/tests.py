import copy

import numpy as np
from django.test import SimpleTestCase, tag

from integrators.services.dynamics import init_state, mclmc_step, full_refresh
from integrators.services.schemes import LEAPFROG, MINIMAL_NORM_2, MINIMAL_NORM_4
from targets.services.builtins import standard_gaussian
from targets.services.distributions import TargetDistribution

from .services.kernels import (
    AdjustedKernelConfig,
    KernelConfigError,
    UnadjustedKernelConfig,
    default_acceptance,
    mams_kernel,
    unadjusted_kernel,
)


def streams(n, seed=0):
    return [np.random.default_rng([seed, i]) for i in range(n)]


def exact_start(target, n, seed=0):
    x = target.exact_sampler(np.random.default_rng(seed), n)
    state, _ = init_state(x, np.zeros_like(x), target)
    return state


class ConfigTests(SimpleTestCase):
    def test_unadjusted_validation(self):
        with self.assertRaises(KernelConfigError):
            UnadjustedKernelConfig(0.0, 1.0, LEAPFROG)
        with self.assertRaises(KernelConfigError):
            UnadjustedKernelConfig(0.1, -1.0, LEAPFROG)

    def test_adjusted_validation(self):
        with self.assertRaises(KernelConfigError):
            AdjustedKernelConfig(0.1, 0, 1.0, 0.7, MINIMAL_NORM_2)
        with self.assertRaises(KernelConfigError):
            AdjustedKernelConfig(0.1, 15, 1.0, 1.0, MINIMAL_NORM_2)

    def test_partial_refresh_follows_step_size(self):
        cfg = AdjustedKernelConfig.for_step_size(0.2, MINIMAL_NORM_2)
        self.assertEqual(cfg.steps_per_proposal, 15)
        self.assertAlmostEqual(cfg.partial_decoherence, 1.25 * 15 * 0.2)
        self.assertEqual(cfg.target_acceptance, 0.7)
        moved = cfg.with_step_size(0.4)
        self.assertAlmostEqual(moved.partial_decoherence, 1.25 * 15 * 0.4)
        self.assertEqual(moved.target_acceptance, 0.7)

    def test_default_acceptance_by_order(self):
        self.assertEqual(default_acceptance(MINIMAL_NORM_2), 0.7)
        self.assertEqual(default_acceptance(MINIMAL_NORM_4), 0.9)

    def test_gradient_cost_per_proposal(self):
        self.assertEqual(AdjustedKernelConfig.for_step_size(0.1, MINIMAL_NORM_2).gradient_calls, 30)
        self.assertEqual(AdjustedKernelConfig.for_step_size(0.1, MINIMAL_NORM_4).gradient_calls, 75)


class UnadjustedKernelTests(SimpleTestCase):
    def test_small_step_barely_moves(self):
        target, _, _ = standard_gaussian(4)
        state = exact_start(target, 8)
        state.u = full_refresh(state, streams(8, 1)).u
        result = unadjusted_kernel(state, UnadjustedKernelConfig(1e-8, 1.0, LEAPFROG), target, streams(8))
        self.assertLess(np.max(np.abs(result.new_state.x - state.x)), 1e-7)
        self.assertLess(np.max(np.abs(result.energy_change)), 1e-6)
        self.assertEqual(result.gradient_calls, 1)

    def test_same_as_one_mclmc_step(self):
        target, _, _ = standard_gaussian(3)
        state = exact_start(target, 5)
        state.u = full_refresh(state, streams(5, 2)).u
        cfg = UnadjustedKernelConfig(0.3, 1.7, MINIMAL_NORM_2)
        a = unadjusted_kernel(state, cfg, target, streams(5))
        b = mclmc_step(state, 0.3, 1.7, MINIMAL_NORM_2, target, streams(5))
        np.testing.assert_array_equal(a.new_state.x, b.new_state.x)
        np.testing.assert_array_equal(a.energy_change, b.energy_change)


class MamsKernelTests(SimpleTestCase):
    def test_zero_energy_error_is_always_accepted(self):
        flat = TargetDistribution("flat", 3, lambda x: np.zeros(x.shape[0]), lambda x: np.zeros_like(x))
        state = exact_start(standard_gaussian(3)[0], 20)
        state, _ = init_state(state.x, state.u, flat)
        out = mams_kernel(state, AdjustedKernelConfig.for_step_size(0.5, MINIMAL_NORM_2), flat, streams(20))
        self.assertTrue(out.accepted.all())
        np.testing.assert_array_equal(out.energy_change, 0.0)

    def test_rejected_proposals_do_not_move(self):
        def log_density(x):
            return np.where(np.max(np.abs(x), axis=1) > 0.01, -np.inf, 0.0)

        box = TargetDistribution("box", 2, log_density, lambda x: np.zeros_like(x))
        state, _ = init_state(np.zeros((6, 2)), np.zeros((6, 2)), box)
        out = mams_kernel(state, AdjustedKernelConfig.for_step_size(1.0, MINIMAL_NORM_2), box, streams(6))
        self.assertFalse(out.accepted.any())
        self.assertTrue(out.divergent.all())
        np.testing.assert_array_equal(out.state.x, state.x)
        np.testing.assert_array_equal(out.state.log_density, state.log_density)
        np.testing.assert_array_equal(out.state.gradient, state.gradient)

    def test_energy_is_sum_of_step_energies(self):
        target, _, _ = standard_gaussian(4)
        state = exact_start(target, 10)
        cfg = AdjustedKernelConfig.for_step_size(0.4, MINIMAL_NORM_2, steps_per_proposal=5)
        rngs = streams(10)
        replay = copy.deepcopy(rngs)

        out = mams_kernel(state, cfg, target, rngs)

        s = full_refresh(state, replay)
        total = np.zeros(10)
        for _ in range(cfg.steps_per_proposal):
            step = mclmc_step(s, cfg.step_size, cfg.partial_decoherence, cfg.scheme, target, replay)
            s = step.new_state
            total = total + step.energy_change
        np.testing.assert_array_equal(out.energy_change, total)
        self.assertEqual(out.gradient_calls, 10)

        log_u = np.log([rng.random() for rng in replay])
        np.testing.assert_array_equal(out.accepted, log_u < -total)
        np.testing.assert_array_equal(out.state.x[out.accepted], s.x[out.accepted])
        np.testing.assert_array_equal(out.state.x[~out.accepted], state.x[~out.accepted])

    def test_acceptance_decreases_with_step_size(self):
        target, _, _ = standard_gaussian(10)
        state = exact_start(target, 1000, seed=3)
        rates = []
        for eps in np.linspace(0.2, 3.0, 10):
            cfg = AdjustedKernelConfig.for_step_size(eps, MINIMAL_NORM_2)
            rates.append(mams_kernel(state, cfg, target, streams(1000, 7)).accepted.mean())
        for lower, higher in zip(rates, rates[1:]):
            self.assertLessEqual(higher, lower + 0.02)
        self.assertGreater(rates[0], rates[-1])

    @tag("slow")
    def test_stationary_on_gaussian(self):
        target, _, _ = standard_gaussian(2)
        chains, proposals = 512, 2000
        state = exact_start(target, chains, seed=5)
        rngs = streams(chains, 11)
        cfg = AdjustedKernelConfig.for_step_size(1.0, MINIMAL_NORM_2)
        sums = np.zeros((chains, 2))
        for _ in range(proposals):
            state = mams_kernel(state, cfg, target, rngs).state
            sums += state.x ** 2
        per_chain = sums / proposals
        se = per_chain.std(axis=0, ddof=1) / np.sqrt(chains)
        self.assertTrue(np.all(np.abs(per_chain.mean(axis=0) - 1.0) < 3 * se))
