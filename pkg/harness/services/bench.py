"""
Benchmark suite: every (target, chains, seed) cell is one full run, scored by
the gradient calls per chain needed for the second-moment bias to stay below
each threshold.
"""
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from django.conf import settings

from adaptation.services.ensemble import EnsembleError
from adaptation.services.laps import AdaptationConfig, laps_run
from diagnostics.services.bias import grads_to_threshold
from integrators.services.schemes import SchemeError
from targets.services.registry import build_target

from .traces import ensure_writable

logger = logging.getLogger(__name__)

FAILED = "FAILED"
SUMMARY_FILE = "summary.csv"
TABLE_FILE = "table.txt"


class BenchSuiteError(ValueError):
    pass


@dataclass
class BenchSuite:
    targets: List[Dict[str, Any]]
    chains: List[int]
    seeds: List[int]
    thresholds: List[float] = field(default_factory=lambda: [0.01])
    # AdaptationConfig field overrides applied to every cell, e.g. {"preconditioning": false}
    adaptation: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BenchSuite":
        try:
            suite = cls(
                targets=[dict(t) for t in data["targets"]],
                chains=[int(m) for m in data["chains"]],
                seeds=[int(s) for s in data["seeds"]],
                thresholds=[float(t) for t in data.get("thresholds", [0.01])],
                adaptation=dict(data.get("adaptation") or {}),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise BenchSuiteError(f"Invalid bench suite: {e}")
        if not suite.targets or not suite.chains or not suite.seeds or not suite.thresholds:
            raise BenchSuiteError("Bench suite needs at least one target, chain count, seed and threshold.")
        for entry in suite.targets:
            if "target" not in entry:
                raise BenchSuiteError(f"Bench target entry {entry} has no 'target' name.")
        unknown = sorted(set(suite.adaptation) - {f.name for f in fields(AdaptationConfig)})
        if unknown:
            raise BenchSuiteError(f"Unknown adaptation override(s): {', '.join(unknown)}.")
        try:
            suite.configure(AdaptationConfig())
        except (EnsembleError, SchemeError, TypeError, ValueError) as e:
            raise BenchSuiteError(f"Invalid adaptation override: {e}")
        return suite

    @classmethod
    def from_settings(cls) -> "BenchSuite":
        return cls.from_dict(settings.LAPS_BENCH_SUITE)

    def configure(self, base: AdaptationConfig) -> AdaptationConfig:
        return replace(base, **self.adaptation)


def target_label(entry: Dict[str, Any]) -> str:
    name = entry["target"]
    return f"{name}(d={entry['dim']})" if "dim" in entry else name


def threshold_columns(thresholds: List[float]) -> List[str]:
    cols = []
    for thr in thresholds:
        cols += [f"grads_to_bmax_{thr:g}", f"grads_to_bavg_{thr:g}"]
    return cols


def run_cell(entry: Dict[str, Any], chains: int, seed: int, thresholds, config: AdaptationConfig, workers=None):
    params = {k: v for k, v in entry.items() if k != "target"}
    target, truth, init = build_target(entry["target"], **params)
    result = laps_run(target, init, chains, config, seed, workers=workers, ground_truth=truth)
    row: Dict[str, Any] = {
        "status": "ok",
        "gradient_calls_per_chain": result.records[-1].gradient_calls_per_chain if result.records else None,
        "switch_iteration": result.switch_iteration,
    }
    for thr in thresholds:
        row[f"grads_to_bmax_{thr:g}"] = grads_to_threshold(result.records, thr, "max")
        row[f"grads_to_bavg_{thr:g}"] = grads_to_threshold(result.records, thr, "avg")
    return row


def run_suite(suite: BenchSuite, config: Optional[AdaptationConfig] = None, workers=None, progress=None) -> pd.DataFrame:
    config = suite.configure(config or AdaptationConfig.from_settings())
    rows = []
    for entry in suite.targets:
        for chains in suite.chains:
            for seed in suite.seeds:
                row: Dict[str, Any] = {"target": target_label(entry), "chains": chains, "seed": seed}
                try:
                    row.update(run_cell(entry, chains, seed, suite.thresholds, config, workers))
                except Exception as e:
                    logger.exception("bench cell %s M=%d seed=%d failed", row["target"], chains, seed)
                    row.update({"status": f"{FAILED}: {e}"})
                rows.append(row)
                if progress is not None:
                    progress(row)
    columns = ["target", "chains", "seed", "status", *threshold_columns(suite.thresholds),
               "gradient_calls_per_chain", "switch_iteration"]
    frame = pd.DataFrame(rows, columns=columns)
    for col in threshold_columns(suite.thresholds) + ["gradient_calls_per_chain", "switch_iteration"]:
        frame[col] = frame[col].astype("Int64")
    return frame


def summary_table(frame: pd.DataFrame, thresholds: List[float]) -> pd.DataFrame:
    """Target x chains, mean over successful seeds, one column per score."""
    ok = frame[frame["status"] == "ok"]
    cols = threshold_columns(thresholds)
    if ok.empty:
        return pd.DataFrame(columns=cols)
    values = ok[["target", "chains", *cols]].copy()
    for col in cols:
        values[col] = values[col].astype("float64")
    table = values.groupby(["target", "chains"], sort=False)[cols].mean()
    return table.round(1)


def failed_cells(frame: pd.DataFrame) -> int:
    return int((frame["status"] != "ok").sum())


def write_bench(frame: pd.DataFrame, thresholds: List[float], directory) -> Dict[str, Path]:
    directory = ensure_writable(Path(directory))
    summary = directory / SUMMARY_FILE
    frame.to_csv(summary, index=False, na_rep="", lineterminator="\n")
    table = directory / TABLE_FILE
    table.write_text(format_table(frame, thresholds) + "\n", encoding="utf-8")
    return {"summary": summary, "table": table}


def format_table(frame: pd.DataFrame, thresholds: List[float]) -> str:
    text = summary_table(frame, thresholds).to_string(na_rep="-")
    failures = failed_cells(frame)
    if failures:
        text += f"\n\n{failures} cell(s) failed; see the status column of {SUMMARY_FILE}."
    return text


def chain_count_spread(frame: pd.DataFrame, column: str) -> pd.Series:
    """Max/min ratio of a score across chain counts, per target."""
    ok = frame[frame["status"] == "ok"].copy()
    ok[column] = ok[column].astype("float64")
    per_m = ok.groupby(["target", "chains"])[column].mean()
    return per_m.groupby(level="target").agg(lambda s: float(np.max(s) / np.min(s)))
