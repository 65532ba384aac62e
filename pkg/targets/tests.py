import numpy as np
from django.test import SimpleTestCase

from .services.builtins import (
    banana_target,
    conditioned_spectrum,
    ill_conditioned_gaussian,
    random_rotation,
    standard_gaussian,
)
from .services.distributions import GroundTruth, InitialDistribution, TargetError
from .services.registry import available_targets, build_target, register_target, unregister_target


def finite_difference_gradient(target, x, h=1e-6):
    grad = np.zeros_like(x)
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (target.log_density(x + e) - target.log_density(x - e)) / (2 * h)
    return grad


class GradientTests(SimpleTestCase):
    def assert_gradient_matches(self, target, points, rtol=1e-5, atol=1e-6):
        for x in points:
            np.testing.assert_allclose(target.gradient(x), finite_difference_gradient(target, x), rtol=rtol, atol=atol)

    def test_banana_gradient(self):
        target, _, _ = banana_target()
        rng = np.random.default_rng(1)
        self.assert_gradient_matches(target, rng.normal(scale=[10.0, 3.0], size=(20, 2)))

    def test_icg_gradient(self):
        target, _, _ = ill_conditioned_gaussian(10, seed=3, target_condition=100.0)
        rng = np.random.default_rng(2)
        self.assert_gradient_matches(target, rng.standard_normal((10, 10)), rtol=1e-4, atol=1e-5)

    def test_batched_and_single_point_agree(self):
        target, _, _ = banana_target()
        x = np.array([[1.0, 2.0], [-3.0, 0.5]])
        np.testing.assert_allclose(target.log_density(x)[1], target.log_density(x[1]))
        np.testing.assert_allclose(target.gradient(x)[0], target.gradient(x[0]))

    def test_wrong_dimension_is_rejected(self):
        target, _, _ = banana_target()
        with self.assertRaises(TargetError):
            target.log_density(np.zeros(3))


class BananaTests(SimpleTestCase):
    def test_ground_truth_values(self):
        _, truth, _ = banana_target()
        np.testing.assert_allclose(truth.second_moments, [100.0, 19.0])
        np.testing.assert_allclose(truth.second_moment_variances, [20000.0, 4610.0])

    def test_exact_sampler_matches_ground_truth(self):
        target, truth, _ = banana_target()
        n = 200_000
        x = target.exact_sampler(np.random.default_rng(0), n)
        moments = np.mean(x ** 2, axis=0)
        se = np.sqrt(truth.second_moment_variances / n)
        self.assertTrue(np.all(np.abs(moments - truth.second_moments) < 4 * se))

    def test_density_peaks_on_the_ridge(self):
        target, _, _ = banana_target()
        on_ridge = target.log_density(np.array([5.0, 0.03 * (25.0 - 100.0)]))
        off_ridge = target.log_density(np.array([5.0, 2.0]))
        self.assertGreater(on_ridge, off_ridge)


class IllConditionedGaussianTests(SimpleTestCase):
    def test_condition_number(self):
        target, truth, _ = ill_conditioned_gaussian(100, seed=0, target_condition=1e5)
        eig = target.extras["eigenvalues"]
        self.assertAlmostEqual(eig.max() / eig.min(), 1e5, delta=1e5 * 1e-9)
        np.testing.assert_allclose(truth.second_moments, np.diag(target.extras["covariance"]))
        np.testing.assert_allclose(truth.second_moment_variances, 2 * truth.second_moments ** 2)

    def test_same_seed_same_target(self):
        a, _, _ = ill_conditioned_gaussian(20, seed=5)
        b, _, _ = ill_conditioned_gaussian(20, seed=5)
        c, _, _ = ill_conditioned_gaussian(20, seed=6)
        np.testing.assert_array_equal(a.extras["covariance"], b.extras["covariance"])
        self.assertFalse(np.allclose(a.extras["covariance"], c.extras["covariance"]))

    def test_rotation_is_orthogonal(self):
        q = random_rotation(8, np.random.default_rng(4))
        np.testing.assert_allclose(q @ q.T, np.eye(8), atol=1e-12)

    def test_spectrum_keeps_minimum(self):
        raw = np.array([0.5, 2.0, 0.1, 7.0])
        out = conditioned_spectrum(raw, 1e3)
        self.assertAlmostEqual(out.min(), 0.1)
        self.assertAlmostEqual(out.max() / out.min(), 1e3, places=6)
        np.testing.assert_array_equal(np.argsort(out), np.argsort(raw))

    def test_too_small_dimension(self):
        with self.assertRaises(TargetError):
            ill_conditioned_gaussian(1)

    def test_exact_sampler_covariance(self):
        target, _, _ = ill_conditioned_gaussian(5, seed=1, target_condition=10.0)
        x = target.exact_sampler(np.random.default_rng(9), 400_000)
        cov = target.extras["covariance"]
        np.testing.assert_allclose(np.cov(x.T), cov, atol=0.02 * np.max(np.diag(cov)))


class GroundTruthTests(SimpleTestCase):
    def test_rejects_non_positive_variance(self):
        with self.assertRaises(TargetError):
            GroundTruth(np.ones(2), np.array([1.0, 0.0]))

    def test_rejects_shape_mismatch(self):
        with self.assertRaises(TargetError):
            GroundTruth(np.ones(2), np.ones(3))


class InitialDistributionTests(SimpleTestCase):
    def test_draw_validates_shape(self):
        init = InitialDistribution(3, lambda rng: rng.standard_normal(2))
        with self.assertRaises(TargetError):
            init.draw(np.random.default_rng(0))

    def test_draw_rejects_non_finite(self):
        init = InitialDistribution(2, lambda rng: np.array([np.nan, 0.0]))
        with self.assertRaises(TargetError):
            init.draw(np.random.default_rng(0))


class RegistryTests(SimpleTestCase):
    def tearDown(self):
        unregister_target("shifted")

    def test_builtins_available(self):
        self.assertTrue({"banana", "gaussian", "icg"} <= set(available_targets()))

    def test_aliases(self):
        target, _, _ = build_target("standard_gaussian", dim=4)
        self.assertEqual(target.dimension, 4)
        target, _, _ = build_target("ill_conditioned_gaussian", dim=6, condition=10.0)
        self.assertEqual(target.name, "icg")

    def test_unknown_target(self):
        with self.assertRaises(TargetError):
            build_target("nope")

    def test_register_user_target_without_ground_truth(self):
        def shifted(dim=3, **_):
            target, _, init = standard_gaussian(dim)
            return target, None, init

        register_target("shifted", shifted)
        with self.assertLogs("targets.services.registry", level="WARNING"):
            target, truth, _ = build_target("shifted", dim=5)
        self.assertIsNone(truth)
        self.assertEqual(target.dimension, 5)

        with self.assertRaises(TargetError):
            register_target("shifted", shifted)
        register_target("shifted", shifted, replace=True)

    def test_builtins_cannot_be_removed(self):
        with self.assertRaises(TargetError):
            unregister_target("banana")

    def test_rescaled_target(self):
        target, _, _ = ill_conditioned_gaussian(4, seed=2, target_condition=50.0)
        s = np.array([1.0, 2.0, 0.5, 3.0])
        wrapped = target.rescaled(s)
        y = np.random.default_rng(0).standard_normal((3, 4))
        np.testing.assert_allclose(wrapped.log_density(y), target.log_density(y * s))
        np.testing.assert_allclose(wrapped.gradient(y), target.gradient(y * s) * s)
