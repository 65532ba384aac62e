from django.core.management.base import BaseCommand, CommandError

from harness.services.traces import TraceFormatError, write_plot_data


class Command(BaseCommand):
    help = "Turn a trace.csv into tidy plot series keyed by gradient calls per chain."

    def add_arguments(self, parser):
        parser.add_argument("trace", help="path to trace.csv")
        parser.add_argument("--out", help="output CSV (default: plotdata.csv next to the trace)")

    def handle(self, *args, **opts):
        try:
            out = write_plot_data(opts["trace"], opts.get("out"))
        except TraceFormatError as e:
            raise CommandError(str(e))
        except OSError as e:
            raise CommandError(f"Cannot write plot data: {e}")
        self.stdout.write(self.style.SUCCESS(f"Plot data: {out}"))
