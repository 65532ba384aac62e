"""
Second-moment bias against ground truth.

For f = x_i^2: b^2[f] = (E_rho[f] - E_p[f])^2 / Var_p[f], reported per
coordinate with its maximum and mean. Positions must already be in the
target's original coordinates.
"""
import logging
from typing import Iterable, Literal, Optional

import numpy as np

from adaptation.services.ensemble import ensemble_expectation
from targets.services.distributions import GroundTruth

from .records import BiasReport, Phase, RunRecord

logger = logging.getLogger(__name__)


def bias(
    x: np.ndarray,
    truth: Optional[GroundTruth],
    *,
    gradient_calls_per_chain: int = 0,
    iteration: int = 0,
    phase: Phase = Phase.UNADJUSTED,
) -> Optional[BiasReport]:
    if truth is None:
        return None
    moments = ensemble_expectation(np.asarray(x, dtype=float) ** 2, "second moments")
    per_coord = (moments - truth.second_moments) ** 2 / truth.second_moment_variances
    return BiasReport(
        per_coordinate=per_coord,
        b2_max=float(np.max(per_coord)),
        b2_avg=float(np.mean(per_coord)),
        gradient_calls_per_chain=int(gradient_calls_per_chain),
        iteration=int(iteration),
        phase=phase,
    )


def grads_to_threshold(
    records: Iterable[RunRecord],
    threshold: float,
    metric: Literal["max", "avg"] = "max",
) -> Optional[int]:
    """
    Gradient calls per chain from which the bias metric stays below
    `threshold` until the end of the run. Records without a bias report are
    skipped; None if the last report is not below the threshold.
    """
    if metric not in ("max", "avg"):
        raise ValueError(f"metric must be 'max' or 'avg', got {metric!r}.")
    answer = None
    for rec in records:
        if rec.bias is None:
            continue
        value = rec.bias.b2_max if metric == "max" else rec.bias.b2_avg
        if value < threshold:
            if answer is None:
                answer = rec.gradient_calls_per_chain
        else:
            answer = None
    return answer
