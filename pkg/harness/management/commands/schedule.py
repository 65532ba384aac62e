from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from harness.services.experiments import (
    COLD_START_SCALE,
    DEFAULT_SEEDS,
    FIXED_MULTIPLIERS,
    MATCH_THRESHOLD,
    schedule_experiment,
)
from harness.services.traces import TraceFormatError, ensure_writable
from targets.services.distributions import TargetError


class Command(BaseCommand):
    help = "Compare the adaptive step-size schedule with fixed step sizes at the same gradient budget."

    def add_arguments(self, parser):
        parser.add_argument("--target", default="gaussian")
        parser.add_argument("--dim", type=int, default=50)
        parser.add_argument("--chains", type=int, default=4096)
        parser.add_argument("--seeds", type=int, nargs="+", default=list(DEFAULT_SEEDS))
        parser.add_argument("--iterations", type=int, default=200, help="budget of the adaptive run")
        parser.add_argument("--start-scale", type=float, default=COLD_START_SCALE,
                            help="chains start from N(0, scale^2 I)")
        parser.add_argument("--threshold", type=float, default=MATCH_THRESHOLD,
                            help="b2_avg level that fixes the matched budget")
        parser.add_argument("--workers", type=int, default=0)
        parser.add_argument("--out", help="optional CSV path for the comparison table")

    def handle(self, *args, **opts):
        try:
            table = schedule_experiment(
                target_name=opts["target"],
                dim=opts["dim"],
                chains=opts["chains"],
                seeds=opts["seeds"],
                iterations=opts["iterations"],
                multipliers=FIXED_MULTIPLIERS,
                start_scale=opts["start_scale"],
                threshold=opts["threshold"],
                workers=opts["workers"],
            )
        except (TargetError, ValueError) as e:
            raise CommandError(str(e))

        self.stdout.write(table.to_string(index=False))
        if opts.get("out"):
            out = Path(opts["out"])
            try:
                ensure_writable(out.parent)
            except TraceFormatError as e:
                raise CommandError(str(e))
            table.to_csv(out, index=False, lineterminator="\n")
            self.stdout.write(f"Table: {out}")
