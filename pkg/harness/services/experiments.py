"""
Adaptive versus fixed step-size schedules for the unadjusted dynamics.

Every run starts cold, from N(0, start_scale^2 I). The adaptive run is the
ordinary unadjusted phase. The matched budget is the first gradient count
from which its b2_avg stays below `threshold`, and its step size there is
eps_ref. Fixed-step runs at multiples of eps_ref then spend exactly that
budget, so all schedules are compared before the ensembles reach the 1/M
noise floor. Results are averaged over seeds.
"""
import logging
from dataclasses import replace
from typing import List, Optional, Sequence

import pandas as pd

from adaptation.services.laps import AdaptationConfig, laps_run
from diagnostics.services.bias import grads_to_threshold
from diagnostics.services.records import RunRecord
from targets.services.distributions import standard_normal_start
from targets.services.registry import build_target

logger = logging.getLogger(__name__)

FIXED_MULTIPLIERS = (0.25, 1.0, 4.0)
DEFAULT_SEEDS = (0, 1, 2)
COLD_START_SCALE = 3.0
MATCH_THRESHOLD = 0.01
SCHEDULE_COLUMNS = ["schedule", "step_size", "gradient_calls_per_chain", "b2_max", "b2_avg"]


def matched_record(records: List[RunRecord], threshold: float) -> RunRecord:
    """The record at which b2_avg drops below `threshold` for good, else the last one."""
    grads = grads_to_threshold(records, threshold, "avg")
    if grads is None:
        logger.warning("adaptive run never stayed below b2_avg=%g; using the whole budget", threshold)
        return records[-1]
    return next(r for r in records if r.gradient_calls_per_chain == grads and r.bias is not None)


def _row(label: str, seed: int, step_size: float, record: RunRecord) -> dict:
    return {
        "schedule": label,
        "seed": seed,
        "step_size": step_size,
        "gradient_calls_per_chain": record.gradient_calls_per_chain,
        "b2_max": record.b2_max,
        "b2_avg": record.b2_avg,
    }


def schedule_experiment(
    target_name: str = "gaussian",
    dim: int = 50,
    chains: int = 4096,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    iterations: int = 200,
    multipliers: Sequence[float] = FIXED_MULTIPLIERS,
    start_scale: Optional[float] = COLD_START_SCALE,
    threshold: float = MATCH_THRESHOLD,
    workers: Optional[int] = None,
    config: Optional[AdaptationConfig] = None,
) -> pd.DataFrame:
    """One row per schedule with the seed-averaged step size and final bias at the matched budget."""
    target, truth, init = build_target(target_name, dim=dim)
    if truth is None:
        raise ValueError(f"Target '{target_name}' has no ground truth; the schedules cannot be compared.")
    if not seeds:
        raise ValueError("schedule_experiment needs at least one seed.")
    if start_scale is not None:
        init = standard_normal_start(target.dimension, float(start_scale))
    base = replace(config or AdaptationConfig(), maxiter=int(iterations), adjusted=False, switch_after=None)

    rows = []
    for seed in seeds:
        adaptive = laps_run(target, init, chains, base, seed, workers=workers, ground_truth=truth)
        budget = matched_record(adaptive.records, threshold)
        eps_ref = budget.step_size
        rows.append(_row("adaptive", seed, eps_ref, budget))
        logger.info(
            "seed %d: matched budget %d gradient calls, eps_ref=%.4g, adaptive b2_avg=%.3g",
            seed, budget.gradient_calls_per_chain, eps_ref, budget.b2_avg,
        )
        for k in multipliers:
            fixed = replace(base, maxiter=budget.iteration, fixed_step_size=k * eps_ref)
            result = laps_run(target, init, chains, fixed, seed, workers=workers, ground_truth=truth)
            rows.append(_row(f"fixed x{k:g}", seed, k * eps_ref, result.records[-1]))

    per_seed = pd.DataFrame(rows)
    table = per_seed.groupby("schedule", sort=False)[SCHEDULE_COLUMNS[1:]].mean().reset_index()
    return table[SCHEDULE_COLUMNS]
