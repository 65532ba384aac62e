from django.core.management.base import BaseCommand, CommandError

from adaptation.services.bisection import BisectionError
from adaptation.services.ensemble import EnsembleError
from adaptation.services.laps import laps_run
from harness.services.config import RunConfig, RunConfigError
from harness.services.traces import TraceFormatError, ensure_writable, write_run
from integrators.services.schemes import SchemeError
from kernels.services.kernels import KernelConfigError
from targets.services.distributions import TargetError


class Command(BaseCommand):
    help = "Run the two-phase ensemble sampler on a named target and write trace.csv + manifest.json."

    def add_arguments(self, parser):
        parser.add_argument("--config", help="JSON file with the same keys as the flags")
        parser.add_argument("--target")
        parser.add_argument("--dim", type=int)
        parser.add_argument("--condition", type=float)
        parser.add_argument("--target-seed", type=int, dest="target_seed")
        parser.add_argument("--chains", type=int)
        parser.add_argument("--seed", type=int)
        parser.add_argument("--maxiter", type=int)
        parser.add_argument("--integrator", choices=["lf", "mn2", "mn4"], help="adjusted-phase integrator")
        parser.add_argument("--unadjusted-integrator", choices=["lf", "mn2", "mn4"], dest="unadjusted_integrator")
        parser.add_argument("--equipartition", choices=["diag", "full"])
        parser.add_argument("--alpha", type=float)
        parser.add_argument("--C", type=float, dest="C")
        parser.add_argument("--acc-target", type=float, dest="acc_target")
        parser.add_argument("--switch-after", type=int, dest="switch_after")
        parser.add_argument("--no-preconditioning", dest="preconditioning", action="store_false", default=None,
                            help="skip the diagonal rescaling before the adjusted phase")
        parser.add_argument("--steps-per-proposal", type=int, dest="steps_per_proposal",
                            help="integration steps per adjusted proposal (default 15)")
        parser.add_argument("--partial-refresh-factor", type=float, dest="partial_refresh_factor",
                            help="L_partial / (N eps) in the adjusted phase (default 1.25)")
        parser.add_argument("--out", help="run directory (default: LAPS_OUTPUT_DIR/<target>-seed<seed>)")
        parser.add_argument("--workers", type=int, help="0 = all cores")

    def handle(self, *args, **opts):
        try:
            cfg = RunConfig.resolve(opts, opts.get("config"))
            adaptation = cfg.adaptation_config()
            target, truth, init = cfg.build_target()
            out_dir = ensure_writable(cfg.output_dir())
        except (RunConfigError, TargetError, SchemeError, EnsembleError, KernelConfigError, TraceFormatError) as e:
            raise CommandError(str(e))

        self.stdout.write(
            f"Running {target.name} (d={target.dimension}) with M={cfg.chains}, seed={cfg.seed}, maxiter={cfg.maxiter}"
        )
        try:
            result = laps_run(
                target, init, int(cfg.chains), adaptation, int(cfg.seed),
                workers=int(cfg.workers), ground_truth=truth,
            )
        except BisectionError as e:
            raise CommandError(f"Step-size tuning failed: {e}")
        except (EnsembleError, SchemeError, KernelConfigError) as e:
            raise CommandError(str(e))

        paths = write_run(out_dir, cfg.as_dict(), adaptation, target, result)
        last = result.records[-1]
        summary = f"{len(result.records)} iterations, {last.gradient_calls_per_chain} gradient calls per chain"
        if result.switch_iteration is not None:
            summary += f", switched at t={result.switch_iteration}, eps={result.adjusted_step_size:.4g}"
        if last.bias is not None:
            summary += f", b2_max={last.b2_max:.3g}, b2_avg={last.b2_avg:.3g}"
        self.stdout.write(self.style.SUCCESS(summary))
        self.stdout.write(f"Trace: {paths['trace']}\nManifest: {paths['manifest']}")
