import json
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings, tag

from adaptation.services.laps import AdaptationConfig, EquipartitionMode
from diagnostics.services.records import TRACE_COLUMNS, BiasReport, Phase, RunRecord
from integrators.services.schemes import MINIMAL_NORM_4

from .services.bench import (
    FAILED,
    BenchSuite,
    BenchSuiteError,
    chain_count_spread,
    format_table,
    run_suite,
    summary_table,
    target_label,
    threshold_columns,
)
from .services.config import RunConfig, RunConfigError, load_config_file
from .services.experiments import matched_record, schedule_experiment
from .services.traces import (
    MANIFEST_FILE,
    PLOT_SERIES,
    SWITCH_MARKER,
    TRACE_FILE,
    TraceFormatError,
    plot_data,
    read_trace,
    write_plot_data,
    write_trace,
)


class TempDirMixin:
    def make_tmp(self) -> Path:
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        return Path(tmp.name)


def synthetic_records(unadjusted=3, adjusted=2):
    records, grads = [], 1
    for t in range(1, unadjusted + adjusted + 1):
        phase = Phase.UNADJUSTED if t <= unadjusted else Phase.ADJUSTED
        grads += 1 if phase is Phase.UNADJUSTED else 30
        report = BiasReport(np.array([0.5 / t, 0.1 / t]), 0.5 / t, 0.3 / t, grads, t, phase)
        extra = (
            {"eevpd": 1e-3 * t, "eevpd_wanted": 2e-3, "max_fluctuation": np.inf if t == 1 else 0.1}
            if phase is Phase.UNADJUSTED
            else {"acceptance": 0.7}
        )
        records.append(RunRecord(t, phase, 0.1 * t, 2.0, grads, 0.0, equipartition=0.2 / t, bias=report, **extra))
    return records


class RunConfigTests(TempDirMixin, SimpleTestCase):
    def write_json(self, text):
        path = self.make_tmp() / "run.json"
        path.write_text(text, encoding="utf-8")
        return str(path)

    @override_settings(LAPS_CHAINS=512, LAPS_SEED=9)
    def test_defaults_come_from_settings(self):
        cfg = RunConfig.resolve({"target": "banana"})
        self.assertEqual(cfg.chains, 512)
        self.assertEqual(cfg.seed, 9)

    def test_cli_beats_file_beats_settings(self):
        path = self.write_json(json.dumps({"target": "icg", "chains": 128, "seed": 3, "target-seed": 4}))
        cfg = RunConfig.resolve({"seed": 5, "chains": None, "verbosity": 1}, path)
        self.assertEqual(cfg.target, "icg")
        self.assertEqual(cfg.seed, 5)
        self.assertEqual(cfg.chains, 128)
        self.assertEqual(cfg.target_seed, 4)

    def test_invalid_json_names_the_line(self):
        path = self.write_json('{\n  "target": "banana",\n  oops\n}')
        with self.assertRaisesMessage(RunConfigError, "line 3"):
            load_config_file(path)

    def test_file_errors(self):
        with self.assertRaisesMessage(RunConfigError, "flux"):
            load_config_file(self.write_json('{"target": "banana", "flux": 1}'))
        with self.assertRaises(RunConfigError):
            load_config_file(self.write_json("[1, 2]"))
        with self.assertRaises(RunConfigError):
            load_config_file(str(self.make_tmp() / "missing.json"))

    def test_validation(self):
        with self.assertRaises(RunConfigError):
            RunConfig.resolve({})
        with self.assertRaisesMessage(RunConfigError, "d >= 2"):
            RunConfig.resolve({"target": "gaussian", "dim": 1})
        with self.assertRaises(RunConfigError):
            RunConfig.resolve({"target": "gaussian", "chains": 1})
        with self.assertRaises(RunConfigError):
            RunConfig.resolve({"target": "gaussian", "equipartition": "sparse"})

    def test_adaptation_config_mapping(self):
        cfg = RunConfig.resolve({
            "target": "icg", "acc_target": 0.8, "integrator": "mn4", "equipartition": "full",
            "alpha": 3.0, "C": 0.05, "maxiter": 77, "switch_after": 12,
        })
        adaptation = cfg.adaptation_config()
        self.assertEqual(adaptation.target_acceptance, 0.8)
        self.assertIs(adaptation.adjusted_scheme(10), MINIMAL_NORM_4)
        self.assertIs(adaptation.equipartition_mode, EquipartitionMode.FULL_RANK)
        self.assertEqual((adaptation.alpha, adaptation.C, adaptation.maxiter), (3.0, 0.05, 77))
        self.assertEqual(adaptation.switch_after, 12)

    def test_adjusted_phase_ablations(self):
        path = self.write_json(json.dumps({"target": "gaussian", "steps-per-proposal": 8}))
        cfg = RunConfig.resolve({"preconditioning": False, "partial_refresh_factor": 2.0}, path)
        adaptation = cfg.adaptation_config()
        self.assertFalse(adaptation.preconditioning)
        self.assertEqual(adaptation.steps_per_proposal, 8)
        self.assertEqual(adaptation.partial_refresh_factor, 2.0)
        defaults = RunConfig.resolve({"target": "gaussian"}).adaptation_config()
        self.assertTrue(defaults.preconditioning)
        self.assertEqual((defaults.steps_per_proposal, defaults.partial_refresh_factor), (15, 1.25))

    def test_ablation_validation(self):
        with self.assertRaises(RunConfigError):
            RunConfig.resolve({"target": "gaussian", "steps_per_proposal": 0})
        with self.assertRaises(RunConfigError):
            RunConfig.resolve({"target": "gaussian", "partial_refresh_factor": -1.0})
        with self.assertRaises(RunConfigError):
            RunConfig.resolve({"target": "gaussian", "preconditioning": "no"})

    def test_target_parameters(self):
        cfg = RunConfig.resolve({"target": "icg", "dim": 6, "condition": 10.0, "target_seed": 2})
        target, truth, init = cfg.build_target()
        self.assertEqual(target.dimension, 6)
        self.assertEqual(truth.dimension, 6)
        self.assertEqual(target.params["condition"], 10.0)

    @override_settings(LAPS_OUTPUT_DIR="/tmp/laps-runs")
    def test_output_dir(self):
        self.assertEqual(RunConfig.resolve({"target": "banana", "seed": 2}).output_dir(), Path("/tmp/laps-runs/banana-seed2"))
        self.assertEqual(RunConfig.resolve({"target": "banana", "out": "x/y"}).output_dir(), Path("x/y"))


class TraceTests(TempDirMixin, SimpleTestCase):
    def setUp(self):
        self.dir = self.make_tmp()
        self.path = write_trace(synthetic_records(), self.dir / TRACE_FILE)

    def rewrite(self, line_no, transform):
        lines = self.path.read_text(encoding="utf-8").split("\n")
        lines[line_no - 1] = transform(lines[line_no - 1])
        self.path.write_text("\n".join(lines), encoding="utf-8")

    def test_header_and_empty_cells(self):
        lines = self.path.read_text(encoding="utf-8").split("\n")
        self.assertEqual(lines[0], ",".join(TRACE_COLUMNS))
        trace = read_trace(self.path)
        self.assertEqual(list(trace.columns), TRACE_COLUMNS)
        self.assertEqual(len(trace), 5)
        self.assertTrue(trace["acceptance"].iloc[:3].isna().all())
        self.assertTrue(trace["eevpd"].iloc[3:].isna().all())
        self.assertEqual(trace["max_fluctuation"].iloc[0], np.inf)
        self.assertEqual(list(trace["phase"]), ["unadjusted"] * 3 + ["adjusted"] * 2)

    def test_bad_header(self):
        self.rewrite(1, lambda line: line.replace("eevpd_wanted", "wanted"))
        with self.assertRaisesMessage(TraceFormatError, "line 1"):
            read_trace(self.path)

    def test_bad_value_names_its_line(self):
        self.rewrite(3, lambda line: line.replace(",2.0,", ",two,", 1))
        with self.assertRaisesMessage(TraceFormatError, "line 3"):
            read_trace(self.path)

    def test_missing_integer(self):
        columns = TRACE_COLUMNS.index("iteration")

        def blank(line):
            cells = line.split(",")
            cells[columns] = ""
            return ",".join(cells)

        self.rewrite(4, blank)
        with self.assertRaisesMessage(TraceFormatError, "line 4"):
            read_trace(self.path)

    def test_unknown_phase(self):
        self.rewrite(2, lambda line: line.replace("unadjusted", "warmup"))
        with self.assertRaisesMessage(TraceFormatError, "line 2"):
            read_trace(self.path)

    def test_gradient_calls_must_not_decrease(self):
        column = TRACE_COLUMNS.index("gradient_calls_per_chain")

        def shrink(line):
            cells = line.split(",")
            cells[column] = "0"
            return ",".join(cells)

        self.rewrite(5, shrink)
        with self.assertRaisesMessage(TraceFormatError, "line 5"):
            read_trace(self.path)

    def test_missing_file(self):
        with self.assertRaises(TraceFormatError):
            read_trace(self.dir / "nope.csv")

    def test_plot_data(self):
        data = plot_data(read_trace(self.path))
        self.assertEqual(len(data), 5 * len(PLOT_SERIES) + 1)
        self.assertEqual(list(dict.fromkeys(data["series"])), PLOT_SERIES + [SWITCH_MARKER])
        marker = data[data["series"] == SWITCH_MARKER].iloc[0]
        self.assertEqual(marker["iteration"], 3)
        self.assertEqual(marker["gradient_calls_per_chain"], 4)
        b2 = data[data["series"] == "b2_max"]
        self.assertTrue((np.diff(b2["gradient_calls_per_chain"].to_numpy()) >= 0).all())

    def test_plot_data_without_adjusted_phase(self):
        trace = read_trace(write_trace(synthetic_records(3, 0), self.dir / "short.csv"))
        self.assertNotIn(SWITCH_MARKER, set(plot_data(trace)["series"]))

    def test_plot_data_adjusted_only(self):
        trace = read_trace(write_trace(synthetic_records(0, 3), self.dir / "adjusted.csv"))
        marker = plot_data(trace).iloc[-1]
        self.assertEqual(marker["series"], SWITCH_MARKER)
        self.assertEqual((marker["iteration"], marker["gradient_calls_per_chain"]), (0, 1))

    def test_write_plot_data_next_to_trace(self):
        out = write_plot_data(self.path)
        self.assertEqual(out, self.dir / "plotdata.csv")
        self.assertEqual(list(pd.read_csv(out).columns), ["series", "iteration", "gradient_calls_per_chain", "value", "phase"])


class BenchServiceTests(SimpleTestCase):
    def frame(self):
        return pd.DataFrame({
            "target": ["banana"] * 4 + ["gaussian(d=4)"],
            "chains": [256, 256, 1024, 1024, 256],
            "seed": [0, 1, 0, 1, 0],
            "status": ["ok", "ok", "ok", "ok", f"{FAILED}: boom"],
            "grads_to_bmax_0.01": pd.array([10, 20, 30, None, None], dtype="Int64"),
            "grads_to_bavg_0.01": pd.array([8, 12, 16, 20, None], dtype="Int64"),
        })

    def test_labels_and_columns(self):
        self.assertEqual(target_label({"target": "icg", "dim": 50}), "icg(d=50)")
        self.assertEqual(target_label({"target": "banana"}), "banana")
        self.assertEqual(threshold_columns([0.01, 0.1]), [
            "grads_to_bmax_0.01", "grads_to_bavg_0.01", "grads_to_bmax_0.1", "grads_to_bavg_0.1",
        ])

    def test_suite_validation(self):
        with self.assertRaises(BenchSuiteError):
            BenchSuite.from_dict({"targets": [], "chains": [256], "seeds": [0]})
        with self.assertRaises(BenchSuiteError):
            BenchSuite.from_dict({"targets": [{"dim": 3}], "chains": [256], "seeds": [0]})
        with self.assertRaises(BenchSuiteError):
            BenchSuite.from_dict({"targets": [{"target": "banana"}], "seeds": [0]})
        self.assertTrue(BenchSuite.from_settings().targets)

    def test_summary_skips_failed_cells(self):
        table = summary_table(self.frame(), [0.01])
        self.assertEqual(table.loc[("banana", 256), "grads_to_bmax_0.01"], 15.0)
        self.assertEqual(table.loc[("banana", 1024), "grads_to_bmax_0.01"], 30.0)
        self.assertNotIn("gaussian(d=4)", table.index.get_level_values("target"))
        self.assertIn("1 cell(s) failed", format_table(self.frame(), [0.01]))

    def test_chain_count_spread(self):
        spread = chain_count_spread(self.frame(), "grads_to_bavg_0.01")
        self.assertAlmostEqual(spread["banana"], 18.0 / 10.0)

    def test_adaptation_overrides(self):
        suite = BenchSuite.from_dict({
            "targets": [{"target": "gaussian", "dim": 4}],
            "chains": [16],
            "seeds": [0],
            "adaptation": {"adjusted": False, "maxiter": 7, "preconditioning": False},
        })
        self.assertFalse(suite.configure(AdaptationConfig()).preconditioning)
        frame = run_suite(suite, AdaptationConfig(maxiter=5), workers=1)
        self.assertEqual(frame["status"].iloc[0], "ok")
        self.assertEqual(frame["gradient_calls_per_chain"].iloc[0], 8)
        self.assertTrue(pd.isna(frame["switch_iteration"].iloc[0]))

    def test_adaptation_override_validation(self):
        base = {"targets": [{"target": "banana"}], "chains": [16], "seeds": [0]}
        with self.assertRaisesMessage(BenchSuiteError, "flux"):
            BenchSuite.from_dict({**base, "adaptation": {"flux": 1}})
        with self.assertRaises(BenchSuiteError):
            BenchSuite.from_dict({**base, "adaptation": {"steps_per_proposal": 0}})
        self.assertEqual(BenchSuite.from_dict(base).adaptation, {})

    def test_failed_cells_are_recorded(self):
        suite = BenchSuite.from_dict({"targets": [{"target": "nope"}], "chains": [8], "seeds": [0]})
        with self.assertLogs("harness.services.bench", level="ERROR"):
            frame = run_suite(suite, AdaptationConfig(maxiter=5), workers=1)
        self.assertTrue(frame["status"].iloc[0].startswith(FAILED))


class CommandTests(TempDirMixin, SimpleTestCase):
    def run_command(self, *args, **options):
        out = StringIO()
        call_command(*args, stdout=out, stderr=StringIO(), **options)
        return out.getvalue()

    def small_run(self, out, **options):
        base = {"target": "banana", "chains": 64, "maxiter": 30, "seed": 3, "workers": 1, "switch_after": 10}
        return self.run_command("run", out=str(out), **{**base, **options})

    def test_run_writes_trace_and_manifest(self):
        out = self.make_tmp() / "run"
        text = self.small_run(out)
        self.assertIn("gradient calls per chain", text)
        trace = read_trace(out / TRACE_FILE)
        self.assertEqual(set(trace["phase"]), {"unadjusted", "adjusted"})
        self.assertEqual((trace["phase"] == "unadjusted").sum(), 10)
        manifest = json.loads((out / MANIFEST_FILE).read_text(encoding="utf-8"))
        self.assertEqual(manifest["seed"], 3)
        self.assertEqual(manifest["target"]["name"], "banana")
        self.assertEqual(manifest["result"]["switch_iteration"], 10)
        self.assertIn("numpy", manifest["versions"])

    def test_run_without_preconditioning(self):
        out = self.make_tmp() / "plain"
        self.small_run(out, preconditioning=False, steps_per_proposal=6)
        manifest = json.loads((out / MANIFEST_FILE).read_text(encoding="utf-8"))
        self.assertEqual(manifest["result"]["preconditioner_scales"], [1.0, 1.0])
        self.assertFalse(manifest["adaptation"]["preconditioning"])
        self.assertEqual(manifest["adaptation"]["steps_per_proposal"], 6)

    def test_same_seed_gives_identical_trace(self):
        tmp = self.make_tmp()
        self.small_run(tmp / "a", workers=1)
        self.small_run(tmp / "b", workers=2)
        self.assertEqual((tmp / "a" / TRACE_FILE).read_bytes(), (tmp / "b" / TRACE_FILE).read_bytes())
        a = json.loads((tmp / "a" / MANIFEST_FILE).read_text(encoding="utf-8"))
        b = json.loads((tmp / "b" / MANIFEST_FILE).read_text(encoding="utf-8"))
        self.assertEqual(a["result"], b["result"])
        self.assertEqual(a["adaptation"], b["adaptation"])

    def test_config_file_run(self):
        tmp = self.make_tmp()
        config = tmp / "run.json"
        config.write_text(json.dumps({"target": "gaussian", "dim": 3, "chains": 32, "maxiter": 15}), encoding="utf-8")
        self.run_command("run", config=str(config), out=str(tmp / "run"), workers=1, equipartition="full")
        self.assertGreaterEqual(len(read_trace(tmp / "run" / TRACE_FILE)), 15)

    def test_run_errors(self):
        tmp = self.make_tmp()
        with self.assertRaisesMessage(CommandError, "nope"):
            self.run_command("run", target="nope", out=str(tmp / "x"))
        with self.assertRaisesMessage(CommandError, "d >= 2"):
            self.run_command("run", target="gaussian", dim=1, out=str(tmp / "y"))
        with self.assertRaises(CommandError):
            self.run_command("run", config=str(tmp / "missing.json"))
        blocker = tmp / "file"
        blocker.write_text("", encoding="utf-8")
        with self.assertRaisesMessage(CommandError, "not writable"):
            self.run_command("run", target="banana", out=str(blocker / "sub"))

    def test_plotdata(self):
        tmp = self.make_tmp()
        self.small_run(tmp / "run")
        text = self.run_command("plotdata", str(tmp / "run" / TRACE_FILE))
        self.assertIn("plotdata.csv", text)
        data = pd.read_csv(tmp / "run" / "plotdata.csv")
        self.assertEqual((data["series"] == SWITCH_MARKER).sum(), 1)

        bad = tmp / "bad.csv"
        bad.write_text("a,b\n1,2\n", encoding="utf-8")
        with self.assertRaisesMessage(CommandError, "line 1"):
            self.run_command("plotdata", str(bad))

    def test_bench(self):
        tmp = self.make_tmp()
        suite = tmp / "suite.json"
        suite.write_text(json.dumps({
            "targets": [{"target": "gaussian", "dim": 4}],
            "chains": [32],
            "seeds": [0, 1],
            "thresholds": [0.5],
        }), encoding="utf-8")
        text = self.run_command("bench", suite=str(suite), maxiter=20, workers=1, out=str(tmp / "bench"))
        self.assertIn("gaussian(d=4)", text)
        summary = pd.read_csv(tmp / "bench" / "summary.csv")
        self.assertEqual(len(summary), 2)
        self.assertEqual(set(summary["status"]), {"ok"})
        self.assertTrue((tmp / "bench" / "table.txt").exists())

    def test_bench_reports_failures(self):
        tmp = self.make_tmp()
        suite = tmp / "suite.json"
        suite.write_text(json.dumps({"targets": [{"target": "nope"}], "chains": [8], "seeds": [0]}), encoding="utf-8")
        with self.assertLogs("harness.services.bench", level="ERROR"):
            with self.assertRaisesMessage(CommandError, "1 bench cell(s) failed"):
                self.run_command("bench", suite=str(suite), maxiter=5, workers=1, out=str(tmp / "bench"))
        summary = pd.read_csv(tmp / "bench" / "summary.csv")
        self.assertTrue(summary["status"].iloc[0].startswith(FAILED))

    def test_bad_suite_file(self):
        tmp = self.make_tmp()
        suite = tmp / "suite.json"
        suite.write_text("{", encoding="utf-8")
        with self.assertRaises(CommandError):
            self.run_command("bench", suite=str(suite), out=str(tmp / "bench"))


class ExperimentTests(SimpleTestCase):
    def test_matched_record_is_where_the_bias_stays_low(self):
        records = synthetic_records()
        self.assertEqual(matched_record(records, 0.12).iteration, 3)

    def test_matched_record_falls_back_to_the_end(self):
        records = synthetic_records()
        with self.assertLogs("harness.services.experiments", level="WARNING"):
            self.assertIs(matched_record(records, 0.01), records[-1])

    def test_needs_a_seed(self):
        with self.assertRaises(ValueError):
            schedule_experiment("gaussian", dim=4, chains=64, seeds=[], iterations=5)

    @tag("slow")
    def test_adaptive_schedule_beats_fixed_step_sizes(self):
        table = schedule_experiment("gaussian", dim=50, chains=4096, seeds=(0, 1, 2), iterations=200, workers=0)
        self.assertEqual(list(table["schedule"]), ["adaptive", "fixed x0.25", "fixed x1", "fixed x4"])
        self.assertEqual(len(set(table["gradient_calls_per_chain"])), 1)
        adaptive = table.iloc[0]["b2_avg"]
        for _, row in table.iloc[1:].iterrows():
            self.assertLessEqual(adaptive, row["b2_avg"], row["schedule"])

    @tag("slow")
    def test_cost_is_stable_across_chain_counts(self):
        suite = BenchSuite.from_dict({
            "targets": [{"target": "banana"}],
            "chains": [256, 1024, 4096],
            "seeds": [0],
            "thresholds": [0.01],
        })
        frame = run_suite(suite, AdaptationConfig(maxiter=300), workers=0)
        self.assertEqual(set(frame["status"]), {"ok"})
        self.assertLess(chain_count_spread(frame, "grads_to_bavg_0.01")["banana"], 2.0)
