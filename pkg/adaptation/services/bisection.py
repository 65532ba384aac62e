"""
Step-size search for the adjusted phase.

The acceptance rate a(eps) of one proposal round falls as eps grows. The
search doubles or halves eps until two probes straddle the target rate,
then bisects the bracket until a probe lands within the tolerance, and
freezes there.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional

logger = logging.getLogger(__name__)

MAX_DOUBLINGS = 20
MAX_HALVINGS = 60
MAX_BISECTIONS = 40


class BisectionError(RuntimeError):
    pass


class SearchStage(str, Enum):
    BRACKETING = "bracketing"
    BISECTING = "bisecting"
    FROZEN = "frozen"


@dataclass
class Probe:
    step_size: float
    acceptance: float


class StepSizeBisection:
    def __init__(
        self,
        step_size: float,
        target_acceptance: float,
        tolerance: float = 0.03,
        max_doublings: int = MAX_DOUBLINGS,
        max_bisections: int = MAX_BISECTIONS,
    ):
        if not step_size > 0:
            raise BisectionError(f"Initial step size must be positive, got {step_size}.")
        self.step_size = float(step_size)
        self.target = float(target_acceptance)
        self.tolerance = float(tolerance)
        self.max_doublings = int(max_doublings)
        self.max_bisections = int(max_bisections)
        self.stage = SearchStage.BRACKETING
        # lo: largest eps seen with acceptance above target; hi: smallest eps below target
        self.lo: Optional[Probe] = None
        self.hi: Optional[Probe] = None
        self.doublings = 0
        self.halvings = 0
        self.bisections = 0
        self.history: List[Probe] = []

    @property
    def frozen(self) -> bool:
        return self.stage is SearchStage.FROZEN

    def observe(self, acceptance: float) -> float:
        """Feed the acceptance measured at `self.step_size`; returns the step size to probe next."""
        if self.frozen:
            return self.step_size
        probe = Probe(self.step_size, float(acceptance))
        self.history.append(probe)

        if abs(probe.acceptance - self.target) <= self.tolerance:
            return self._freeze(probe.step_size, "acceptance %.3f within %.3f of target")

        if probe.acceptance > self.target:
            if self.lo is None or probe.step_size > self.lo.step_size:
                self.lo = probe
        else:
            if self.hi is None or probe.step_size < self.hi.step_size:
                self.hi = probe

        if self.stage is SearchStage.BRACKETING:
            if self.lo is not None and self.hi is not None:
                self.stage = SearchStage.BISECTING
            elif self.hi is None:
                self.doublings += 1
                if self.doublings > self.max_doublings:
                    raise BisectionError(
                        f"No acceptance bracket after {self.max_doublings} doublings: "
                        f"eps={probe.step_size:.4g} still accepts {probe.acceptance:.3f} "
                        f"(target {self.target:.2f})."
                    )
                self.step_size = probe.step_size * 2.0
                return self.step_size
            else:
                self.halvings += 1
                if self.halvings > MAX_HALVINGS:
                    raise BisectionError(
                        f"Acceptance stays at {probe.acceptance:.3f} after {MAX_HALVINGS} halvings "
                        f"(eps={probe.step_size:.4g}); the target looks degenerate."
                    )
                self.step_size = probe.step_size / 2.0
                return self.step_size
        else:
            self.bisections += 1

        midpoint = 0.5 * (self.lo.step_size + self.hi.step_size)
        if self.bisections >= self.max_bisections:
            logger.warning(
                "bisection did not reach acceptance %.2f +/- %.2f in %d rounds; freezing eps at %.4g",
                self.target, self.tolerance, self.max_bisections, midpoint,
            )
            return self._freeze(midpoint, None)
        self.step_size = midpoint
        return self.step_size

    def _freeze(self, step_size: float, reason: Optional[str]) -> float:
        self.step_size = float(step_size)
        self.stage = SearchStage.FROZEN
        if reason:
            last = self.history[-1]
            logger.info("froze eps=%.4g: " + reason, self.step_size, last.acceptance, self.tolerance)
        return self.step_size


def bisection_tune(
    acceptance_at: Callable[[float], float],
    step_size: float,
    target_acceptance: float,
    tolerance: float = 0.03,
) -> float:
    """Run the search to completion against `acceptance_at(eps)`; returns the frozen eps."""
    search = StepSizeBisection(step_size, target_acceptance, tolerance)
    while not search.frozen:
        search.observe(acceptance_at(search.step_size))
    return search.step_size
