import json
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from adaptation.services.ensemble import EnsembleError
from adaptation.services.laps import AdaptationConfig
from harness.services.bench import BenchSuite, BenchSuiteError, format_table, run_suite, write_bench
from harness.services.traces import TraceFormatError


class Command(BaseCommand):
    help = "Run the benchmark suite and write summary.csv plus a target x chains table."

    def add_arguments(self, parser):
        parser.add_argument("--suite", help="JSON file with targets, chains, seeds and thresholds")
        parser.add_argument("--maxiter", type=int)
        parser.add_argument("--workers", type=int, default=settings.LAPS_WORKERS)
        parser.add_argument("--out", help="output directory (default: LAPS_OUTPUT_DIR/bench)")

    def handle(self, *args, **opts):
        try:
            if opts.get("suite"):
                suite = BenchSuite.from_dict(json.loads(Path(opts["suite"]).read_text(encoding="utf-8")))
            else:
                suite = BenchSuite.from_settings()
            config = AdaptationConfig.from_settings(maxiter=opts.get("maxiter"))
        except (OSError, json.JSONDecodeError, BenchSuiteError, EnsembleError) as e:
            raise CommandError(f"Invalid bench suite: {e}")

        def progress(row):
            self.stdout.write(f"  {row['target']} M={row['chains']} seed={row['seed']}: {row['status']}")

        cells = len(suite.targets) * len(suite.chains) * len(suite.seeds)
        self.stdout.write(f"Running {cells} bench cell(s)")
        frame = run_suite(suite, config, workers=opts["workers"], progress=progress)

        out_dir = Path(opts.get("out") or Path(settings.LAPS_OUTPUT_DIR) / "bench")
        try:
            paths = write_bench(frame, suite.thresholds, out_dir)
        except TraceFormatError as e:
            raise CommandError(str(e))

        self.stdout.write(format_table(frame, suite.thresholds))
        self.stdout.write(f"Summary: {paths['summary']}")
        failures = int((frame["status"] != "ok").sum())
        if failures:
            raise CommandError(f"{failures} bench cell(s) failed.")
