import numpy as np
from django.test import SimpleTestCase
from scipy.integrate import solve_ivp

from targets.services.builtins import banana_target, ill_conditioned_gaussian, standard_gaussian
from targets.services.distributions import TargetDistribution

from .services.dynamics import (
    ChainState,
    aligned_velocity,
    deterministic_step,
    full_refresh,
    init_state,
    mclmc_step,
    position_update,
    stochastic_update,
    velocity_update,
)
from .services.schemes import (
    LEAPFROG,
    MINIMAL_NORM_2,
    MINIMAL_NORM_4,
    SCHEMES,
    IntegratorScheme,
    SchemeError,
    adjusted_scheme_for,
    get_scheme,
)


def random_states(target, n, rng, scale=1.0):
    x = scale * rng.standard_normal((n, target.dimension))
    u = rng.standard_normal((n, target.dimension))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    state, divergent = init_state(x, u, target)
    assert not divergent.any()
    return state


def counting(target):
    """The same target, counting gradient evaluations."""
    calls = {"n": 0}

    def gradient(x):
        calls["n"] += 1
        return target.gradient_fn(x)

    wrapped = TargetDistribution(target.name, target.dimension, target.log_density_fn, gradient)
    return wrapped, calls


class SchemeTests(SimpleTestCase):
    def test_coefficients(self):
        self.assertEqual(LEAPFROG.b_coeffs, (0.5, 0.5))
        self.assertAlmostEqual(MINIMAL_NORM_2.b_coeffs[0], 0.1931833275)
        self.assertEqual(MINIMAL_NORM_2.a_coeffs, (0.5, 0.5))
        self.assertAlmostEqual(MINIMAL_NORM_4.b_coeffs[0], 0.0839831526)
        self.assertAlmostEqual(MINIMAL_NORM_4.b_coeffs[1], 0.6822365335)
        self.assertAlmostEqual(MINIMAL_NORM_4.a_coeffs[0], 0.2539785108)
        self.assertAlmostEqual(MINIMAL_NORM_4.a_coeffs[1], -0.032302867)

    def test_normalized_and_palindromic(self):
        for scheme in SCHEMES.values():
            self.assertAlmostEqual(sum(scheme.b_coeffs), 1.0, places=12)
            self.assertAlmostEqual(sum(scheme.a_coeffs), 1.0, places=12)
            np.testing.assert_allclose(scheme.b_coeffs, scheme.b_coeffs[::-1], atol=1e-15)
            np.testing.assert_allclose(scheme.a_coeffs, scheme.a_coeffs[::-1], atol=1e-15)

    def test_gradients_per_step(self):
        self.assertEqual([LEAPFROG.gradients_per_step, MINIMAL_NORM_2.gradients_per_step,
                          MINIMAL_NORM_4.gradients_per_step], [1, 2, 5])

    def test_invalid_scheme(self):
        with self.assertRaises(SchemeError):
            IntegratorScheme("bad", b_coeffs=(0.3, 0.7), a_coeffs=(1.0,), order=2)
        with self.assertRaises(SchemeError):
            IntegratorScheme("bad", b_coeffs=(0.5, 0.5), a_coeffs=(0.5, 0.5), order=2)

    def test_lookup(self):
        self.assertIs(get_scheme("MN4"), MINIMAL_NORM_4)
        with self.assertRaises(SchemeError):
            get_scheme("rk4")
        self.assertIs(adjusted_scheme_for(200), MINIMAL_NORM_2)
        self.assertIs(adjusted_scheme_for(201), MINIMAL_NORM_4)


class PositionUpdateTests(SimpleTestCase):
    def setUp(self):
        self.target, _, _ = standard_gaussian(2)

    def test_moves_along_velocity(self):
        state, _ = init_state(np.zeros((1, 2)), np.array([[1.0, 0.0]]), self.target)
        new, delta, diverged = position_update(state, 0.5, self.target)
        np.testing.assert_allclose(new.x, [[0.5, 0.0]])
        np.testing.assert_array_equal(new.u, state.u)
        self.assertFalse(diverged[0])

    def test_energy_change(self):
        state, _ = init_state(np.zeros((1, 2)), np.array([[1.0, 0.0]]), self.target)
        _, delta, _ = position_update(state, 1.0, self.target)
        self.assertAlmostEqual(delta[0], 0.5)

    def test_zero_step_is_identity(self):
        state, _ = init_state(np.array([[0.3, -1.0]]), np.array([[0.6, 0.8]]), self.target)
        new, delta, _ = position_update(state, 0.0, self.target)
        np.testing.assert_array_equal(new.x, state.x)
        self.assertEqual(delta[0], 0.0)

    def test_non_finite_density_marks_divergence(self):
        def log_density(x):
            return np.where(x[:, 0] > 1.0, np.nan, -0.5 * np.sum(x ** 2, axis=1))

        target = TargetDistribution("wall", 2, log_density, lambda x: -x)
        state, _ = init_state(np.array([[0.0, 0.0], [0.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]), target)
        new, delta, diverged = position_update(state, 2.0, target)
        np.testing.assert_array_equal(diverged, [True, False])
        np.testing.assert_array_equal(new.x[0], [0.0, 0.0])
        self.assertEqual(delta[0], 0.0)


class VelocityUpdateTests(SimpleTestCase):
    def test_zero_gradient(self):
        u = np.array([[0.6, 0.8]])
        state = ChainState(np.zeros((1, 2)), u.copy(), np.zeros(1), np.zeros((1, 2)))
        new, energy = velocity_update(state, 1.0)
        np.testing.assert_array_equal(new.u, u)
        self.assertEqual(energy[0], 0.0)

    def test_aligned_velocity_keeps_direction(self):
        d = 5
        g = np.zeros((1, d))
        g[0, 2] = 3.0
        e = g / 3.0
        state = ChainState(np.zeros((1, d)), e.copy(), np.zeros(1), g)
        eps = 0.7
        new, energy = velocity_update(state, eps)
        np.testing.assert_allclose(new.u, e, atol=1e-14)
        delta = eps * 3.0 / (d - 1)
        self.assertAlmostEqual(energy[0], (d - 1) * delta, places=12)

    def test_matches_hyperbolic_form(self):
        rng = np.random.default_rng(0)
        d = 6
        for _ in range(20):
            g = rng.standard_normal(d) * 3
            u = rng.standard_normal(d)
            u /= np.linalg.norm(u)
            eps = rng.uniform(0.1, 2.0)
            state = ChainState(np.zeros((1, d)), u[None].copy(), np.zeros(1), g[None])
            new, energy = velocity_update(state, eps)

            e = g / np.linalg.norm(g)
            ue = e @ u
            delta = eps * np.linalg.norm(g) / (d - 1)
            denom = np.cosh(delta) + ue * np.sinh(delta)
            expected = (u + (np.sinh(delta) + ue * (np.cosh(delta) - 1)) * e) / denom
            np.testing.assert_allclose(new.u[0], expected, atol=1e-12)
            self.assertAlmostEqual(energy[0], (d - 1) * np.log(denom), places=10)

    def test_large_gradient_does_not_overflow(self):
        d = 3
        g = np.array([[1e6, 0.0, 0.0]])
        u = np.array([[0.0, 1.0, 0.0]])
        state = ChainState(np.zeros((1, d)), u, np.zeros(1), g)
        with np.errstate(over="raise"):
            new, energy = velocity_update(state, 10.0)
        self.assertTrue(np.all(np.isfinite(new.u)))
        self.assertTrue(np.isfinite(energy[0]))

    def test_ode_oracle(self):
        """Closed form against a tight numerical solution of du/dt = (I - u u^T) g / (d - 1), dK/dt = g.u."""
        rng = np.random.default_rng(11)
        for _ in range(100):
            d = int(rng.integers(2, 8))
            g = rng.standard_normal(d)
            u = rng.standard_normal(d)
            u /= np.linalg.norm(u)
            eps = rng.uniform(0.0, 0.1) * (d - 1) / np.linalg.norm(g)

            def rhs(_, y):
                v = y[:d]
                return np.concatenate([(g - (v @ g) * v) / (d - 1), [g @ v]])

            sol = solve_ivp(rhs, (0.0, eps), np.concatenate([u, [0.0]]), method="DOP853", rtol=1e-12, atol=1e-14)
            state = ChainState(np.zeros((1, d)), u[None].copy(), np.zeros(1), g[None])
            new, energy = velocity_update(state, eps)
            np.testing.assert_allclose(new.u[0], sol.y[:d, -1], atol=1e-6)
            self.assertAlmostEqual(energy[0], sol.y[d, -1], delta=1e-6)

    def test_needs_two_dimensions(self):
        state = ChainState(np.zeros((1, 1)), np.ones((1, 1)), np.zeros(1), np.ones((1, 1)))
        with self.assertRaises(SchemeError):
            velocity_update(state, 0.1)


class StochasticUpdateTests(SimpleTestCase):
    def state(self, d=3):
        u = np.zeros((1, d))
        u[0, 0] = 1.0
        return ChainState(np.zeros((1, d)), u, np.zeros(1), np.zeros((1, d)))

    def test_no_noise_limit_still_consumes_stream(self):
        rng = np.random.default_rng(3)
        reference = np.random.default_rng(3)
        new = stochastic_update(self.state(), 1e-300, 1.0, [rng])
        np.testing.assert_allclose(new.u, self.state().u, atol=1e-12)
        reference.standard_normal(3)
        self.assertEqual(rng.standard_normal(), reference.standard_normal())

    def test_zero_step_leaves_velocity(self):
        rng = np.random.default_rng(6)
        reference = np.random.default_rng(6)
        new = stochastic_update(self.state(), 0.0, 2.0, [rng])
        np.testing.assert_array_equal(new.u, self.state().u)
        reference.standard_normal(3)
        self.assertEqual(rng.standard_normal(), reference.standard_normal())

    def test_full_decoherence_limit(self):
        rng = np.random.default_rng(4)
        z = np.random.default_rng(4).standard_normal(3)
        new = stochastic_update(self.state(), 1e6, 1.0, [rng])
        np.testing.assert_allclose(new.u[0], z / np.linalg.norm(z), atol=1e-12)

    def test_mixing_coefficients(self):
        rng = np.random.default_rng(5)
        z = np.random.default_rng(5).standard_normal(3) / np.sqrt(3)
        new = stochastic_update(self.state(), np.log(2.0), 1.0, [rng])
        mixed = 0.5 * self.state().u[0] + np.sqrt(0.75) * z
        np.testing.assert_allclose(new.u[0], mixed / np.linalg.norm(mixed), atol=1e-12)

    def test_noise_has_unit_scale_in_any_dimension(self):
        # E[u . u'] for small eps/L does not depend on d once |Z| ~ 1
        overlaps = []
        for d in (10, 50):
            streams = [np.random.default_rng(1000 + i) for i in range(4000)]
            new = stochastic_update(self.state(d).take(np.zeros(4000, dtype=int)), 0.02, 1.0, streams)
            overlaps.append(np.mean(new.u[:, 0]))
        c1, c2 = np.exp(-0.02), np.sqrt(1 - np.exp(-0.04))
        expected = c1 / np.sqrt(c1 ** 2 + c2 ** 2)
        for overlap in overlaps:
            self.assertAlmostEqual(overlap, expected, delta=0.01)

    def test_rejects_non_positive_scale(self):
        with self.assertRaises(SchemeError):
            stochastic_update(self.state(), 0.1, 0.0, [np.random.default_rng(0)])


class DeterministicCoreTests(SimpleTestCase):
    def targets(self):
        banana, _, _ = banana_target()
        icg, _, _ = ill_conditioned_gaussian(10, seed=1, target_condition=100.0)
        return [(banana, 3.0), (icg, 1.0)]

    def test_time_reversibility(self):
        rng = np.random.default_rng(21)
        for target, scale in self.targets():
            state = random_states(target, 50, rng, scale)
            for scheme in SCHEMES.values():
                fwd, e1, _, div1 = deterministic_step(state, 0.05, scheme, target)
                back, e2, _, div2 = deterministic_step(fwd.flipped(), 0.05, scheme, target)
                self.assertFalse(div1.any() or div2.any())
                np.testing.assert_allclose(back.flipped().x, state.x, atol=1e-9)
                np.testing.assert_allclose(back.flipped().u, state.u, atol=1e-9)
                np.testing.assert_allclose(e1 + e2, 0.0, atol=1e-9)

    def test_energy_accounting_matches_sub_updates(self):
        target, _, _ = banana_target()
        state = random_states(target, 10, np.random.default_rng(8), 3.0)
        eps = 0.2
        scheme = MINIMAL_NORM_2
        _, total, _, _ = deterministic_step(state, eps, scheme, target)

        manual = np.zeros(state.size)
        s = state
        s, dE = velocity_update(s, scheme.b_coeffs[0] * eps)
        manual += dE
        for a, b in zip(scheme.a_coeffs, scheme.b_coeffs[1:]):
            s, dE, _ = position_update(s, a * eps, target)
            manual += dE
            s, dE = velocity_update(s, b * eps)
            manual += dE
        np.testing.assert_array_equal(total, manual)

    def test_gradient_calls_per_step(self):
        base, _, _ = banana_target()
        for scheme in SCHEMES.values():
            target, calls = counting(base)
            state = random_states(target, 4, np.random.default_rng(1))
            calls["n"] = 0
            result = mclmc_step(state, 0.1, 1.0, scheme, target, [np.random.default_rng(i) for i in range(4)])
            self.assertEqual(result.gradient_calls, scheme.gradients_per_step)
            self.assertEqual(calls["n"], scheme.gradients_per_step)


class MclmcStepTests(SimpleTestCase):
    def test_unit_norm_is_preserved(self):
        target, _, _ = banana_target()
        rng = np.random.default_rng(2)
        state = random_states(target, 4, rng, 3.0)
        streams = [np.random.default_rng(100 + i) for i in range(4)]
        for k in range(2500):
            scheme = (LEAPFROG, MINIMAL_NORM_2, MINIMAL_NORM_4)[k % 3]
            state = mclmc_step(state, 0.3, 2.0, scheme, target, streams).new_state
            self.assertLess(np.max(np.abs(np.linalg.norm(state.u, axis=1) - 1.0)), 1e-10)

    def test_divergent_chain_is_held(self):
        def log_density(x):
            return np.where(np.abs(x[:, 0]) > 1.0, -np.inf, -0.5 * np.sum(x ** 2, axis=1))

        target = TargetDistribution("box", 2, log_density, lambda x: -x)
        state, _ = init_state(np.array([[0.9, 0.0], [0.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]), target)
        result = mclmc_step(state, 0.5, 1e12, LEAPFROG, target, [np.random.default_rng(0), np.random.default_rng(1)])
        self.assertTrue(result.divergent[0])
        self.assertFalse(result.divergent[1])
        self.assertEqual(result.energy_change[0], np.inf)
        self.assertTrue(np.all(np.isfinite(result.new_state.x)))
        self.assertTrue(np.isfinite(result.energy_change[1]))

    def test_rejects_non_positive_step(self):
        target, _, _ = standard_gaussian(2)
        state = random_states(target, 2, np.random.default_rng(0))
        with self.assertRaises(SchemeError):
            mclmc_step(state, 0.0, 1.0, LEAPFROG, target, [np.random.default_rng(0)] * 2)

    def test_identical_streams_identical_chains(self):
        target, _, _ = standard_gaussian(3)
        one = random_states(target, 1, np.random.default_rng(0))
        state = ChainState.concatenate([one, one.copy()])
        result = mclmc_step(state, 0.4, 1.5, MINIMAL_NORM_2, target, [np.random.default_rng(9), np.random.default_rng(9)])
        np.testing.assert_array_equal(result.new_state.x[0], result.new_state.x[1])
        np.testing.assert_array_equal(result.new_state.u[0], result.new_state.u[1])


class VelocityInitTests(SimpleTestCase):
    def test_aligned_with_gradient(self):
        g = np.array([[3.0, 4.0], [0.0, 0.0]])
        u = aligned_velocity(g, [np.random.default_rng(0), np.random.default_rng(1)])
        np.testing.assert_allclose(u[0], [0.6, 0.8])
        self.assertAlmostEqual(np.linalg.norm(u[1]), 1.0)

    def test_full_refresh_is_unit(self):
        state = ChainState(np.zeros((3, 4)), np.zeros((3, 4)), np.zeros(3), np.zeros((3, 4)))
        new = full_refresh(state, [np.random.default_rng(i) for i in range(3)])
        np.testing.assert_allclose(np.linalg.norm(new.u, axis=1), 1.0)
