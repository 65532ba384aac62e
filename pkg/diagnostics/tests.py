import numpy as np
from django.test import SimpleTestCase

from targets.services.builtins import standard_gaussian
from targets.services.distributions import GroundTruth

from .services.bias import bias, grads_to_threshold
from .services.records import TRACE_COLUMNS, BiasReport, Phase, RunRecord


def record(grads, b2_max, b2_avg=None, phase=Phase.UNADJUSTED, iteration=1):
    report = None
    if b2_max is not None:
        b2_avg = b2_max if b2_avg is None else b2_avg
        report = BiasReport(np.array([b2_max]), b2_max, b2_avg, grads, iteration, phase)
    return RunRecord(iteration, phase, 0.1, 1.0, grads, 0.0, bias=report)


class BiasTests(SimpleTestCase):
    def test_matching_moments_give_zero(self):
        truth = GroundTruth(np.array([1.0, 4.0]), np.array([2.0, 32.0]))
        x = np.array([[1.0, 2.0], [-1.0, -2.0]])
        report = bias(x, truth)
        self.assertEqual(report.b2_max, 0.0)
        self.assertEqual(report.b2_avg, 0.0)

    def test_single_coordinate_example(self):
        truth = GroundTruth(np.array([1.0]), np.array([2.0]))
        x = np.full((10, 1), np.sqrt(3.0))
        report = bias(x, truth, gradient_calls_per_chain=12, iteration=3, phase=Phase.ADJUSTED)
        self.assertAlmostEqual(report.b2_max, 2.0)
        self.assertEqual(report.gradient_calls_per_chain, 12)
        self.assertEqual(report.iteration, 3)
        self.assertIs(report.phase, Phase.ADJUSTED)

    def test_iid_samples_decay_as_one_over_m(self):
        target, truth, _ = standard_gaussian(50)
        rng = np.random.default_rng(0)
        m = 1000
        values = [bias(target.exact_sampler(rng, m), truth).b2_avg for _ in range(100)]
        self.assertAlmostEqual(np.mean(values) * m, 1.0, delta=0.1)

    def test_without_ground_truth(self):
        self.assertIsNone(bias(np.zeros((3, 2)), None))

    def test_non_finite_chains_are_excluded(self):
        truth = GroundTruth(np.array([1.0, 1.0]), np.array([2.0, 2.0]))
        x = np.array([[1.0, 1.0], [np.nan, 0.0], [-1.0, -1.0]])
        with self.assertLogs("adaptation.services.ensemble", level="WARNING"):
            report = bias(x, truth)
        self.assertEqual(report.b2_max, 0.0)


class GradsToThresholdTests(SimpleTestCase):
    def test_monotone_decrease(self):
        records = [record(g, b) for g, b in zip((10, 20, 30, 40), (1.0, 0.1, 0.005, 0.001))]
        self.assertEqual(grads_to_threshold(records, 0.01), 30)

    def test_dip_then_rise_restarts(self):
        records = [record(g, b) for g, b in zip((10, 20, 30), (0.005, 0.02, 0.005))]
        self.assertEqual(grads_to_threshold(records, 0.01), 30)

    def test_never_stays_below(self):
        records = [record(g, b) for g, b in zip((10, 20, 30), (0.005, 0.004, 0.5))]
        self.assertIsNone(grads_to_threshold(records, 0.01))
        self.assertIsNone(grads_to_threshold([], 0.01))

    def test_records_without_bias_are_skipped(self):
        records = [record(10, 1.0), record(20, 0.001), record(30, None), record(40, 0.002)]
        self.assertEqual(grads_to_threshold(records, 0.01), 20)

    def test_average_metric(self):
        records = [record(10, 0.5, 0.05), record(20, 0.2, 0.001)]
        self.assertEqual(grads_to_threshold(records, 0.01, "avg"), 20)
        self.assertIsNone(grads_to_threshold(records, 0.01, "max"))
        with self.assertRaises(ValueError):
            grads_to_threshold(records, 0.01, "median")

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(3)
        values = np.exp(-np.linspace(0, 8, 60) + 0.5 * rng.standard_normal(60))
        records = [record(10 * (k + 1), float(v)) for k, v in enumerate(values)]
        previous = 0
        for threshold in (1.0, 0.1, 0.01, 0.001):
            grads = grads_to_threshold(records, threshold)
            grads = np.inf if grads is None else grads
            self.assertGreaterEqual(grads, previous)
            previous = grads


class RunRecordTests(SimpleTestCase):
    def test_row_follows_trace_columns(self):
        row = record(7, 0.3, 0.1, phase=Phase.ADJUSTED).as_row()
        self.assertEqual(list(row), TRACE_COLUMNS)
        self.assertEqual(row["phase"], "adjusted")
        self.assertEqual(row["b2_max"], 0.3)
        self.assertEqual(row["b2_avg"], 0.1)
        self.assertIsNone(record(7, None).as_row()["b2_max"])
