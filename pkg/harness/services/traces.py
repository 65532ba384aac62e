"""
Run artifacts on disk.

A run directory holds `trace.csv` (one row per recorded iteration, columns
in TRACE_COLUMNS order, empty cells for values a phase does not produce)
and `manifest.json` (resolved configuration, seed, target parameters and
library versions; no timestamps, so identical runs give identical files).
"""
import json
import logging
import platform
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import django
import numpy as np
import pandas as pd
import scipy
from django.conf import settings

from adaptation.services.laps import AdaptationConfig, LapsResult
from diagnostics.services.records import TRACE_COLUMNS, TRACE_SCHEMA_VERSION, Phase, RunRecord
from targets.services.distributions import TargetDistribution

logger = logging.getLogger(__name__)

TRACE_FILE = "trace.csv"
MANIFEST_FILE = "manifest.json"

PLOT_SERIES = [
    "b2_max",
    "b2_avg",
    "equipartition",
    "eevpd",
    "eevpd_wanted",
    "step_size",
    "decoherence",
    "acceptance",
    "max_fluctuation",
]
PLOT_COLUMNS = ["series", "iteration", "gradient_calls_per_chain", "value", "phase"]
SWITCH_MARKER = "phase_switch"

_NUMERIC = [c for c in TRACE_COLUMNS if c not in ("schema_version", "phase")]
_INTEGER = ("iteration", "gradient_calls_per_chain")


class TraceFormatError(ValueError):
    pass


def ensure_writable(directory: Path) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        probe = directory / ".write-test"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as e:
        raise TraceFormatError(f"Output directory {directory} is not writable: {e}")
    return directory


def records_frame(records: Iterable[RunRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.as_row() for r in records], columns=TRACE_COLUMNS)


def write_trace(records: Iterable[RunRecord], path: Path) -> Path:
    records_frame(records).to_csv(path, index=False, na_rep="", lineterminator="\n")
    return Path(path)


def library_versions() -> Dict[str, str]:
    return {
        "laps": settings.LAPS_VERSION,
        "python": platform.python_version(),
        "django": django.get_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def build_manifest(
    run_config: Dict[str, Any],
    adaptation: AdaptationConfig,
    target: TargetDistribution,
    result: LapsResult,
) -> Dict[str, Any]:
    last = result.records[-1] if result.records else None
    return {
        "schema_version": TRACE_SCHEMA_VERSION,
        "seed": run_config.get("seed"),
        "config": run_config,
        "adaptation": asdict(adaptation),
        "target": {"name": target.name, "dimension": target.dimension, "params": target.params},
        "versions": library_versions(),
        "result": {
            "iterations": len(result.records),
            "switch_iteration": result.switch_iteration,
            "adjusted_step_size": result.adjusted_step_size,
            "preconditioner_scales": result.preconditioner.scales.tolist(),
            "gradient_calls_per_chain": None if last is None else last.gradient_calls_per_chain,
            "final_b2_max": None if last is None else last.b2_max,
            "final_b2_avg": None if last is None else last.b2_avg,
        },
    }


def write_manifest(manifest: Dict[str, Any], path: Path) -> Path:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return Path(path)


def write_run(directory: Path, run_config, adaptation, target, result: LapsResult) -> Dict[str, Path]:
    directory = ensure_writable(directory)
    trace = write_trace(result.records, directory / TRACE_FILE)
    manifest = write_manifest(build_manifest(run_config, adaptation, target, result), directory / MANIFEST_FILE)
    logger.info("wrote %d trace rows to %s", len(result.records), trace)
    return {"trace": trace, "manifest": manifest}


def read_trace(path) -> pd.DataFrame:
    """Parse and validate a trace; errors name the offending CSV line (header is line 1)."""
    path = Path(path)
    if not path.is_file():
        raise TraceFormatError(f"Trace file not found: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise TraceFormatError(f"{path}: line 1: empty trace file")
    except pd.errors.ParserError as e:
        raise TraceFormatError(f"{path}: {e}")

    if list(raw.columns) != TRACE_COLUMNS:
        raise TraceFormatError(f"{path}: line 1: unexpected header {list(raw.columns)}; expected {TRACE_COLUMNS}")
    if raw.empty:
        raise TraceFormatError(f"{path}: line 2: trace has no rows")

    versions = set(raw["schema_version"])
    if versions != {str(TRACE_SCHEMA_VERSION)}:
        bad = raw.index[raw["schema_version"] != str(TRACE_SCHEMA_VERSION)][0]
        raise TraceFormatError(
            f"{path}: line {bad + 2}: unsupported schema_version {raw.at[bad, 'schema_version']!r}"
        )

    phases = {p.value for p in Phase}
    bad_phase = raw.index[~raw["phase"].isin(phases)]
    if len(bad_phase):
        i = bad_phase[0]
        raise TraceFormatError(f"{path}: line {i + 2}: unknown phase {raw.at[i, 'phase']!r}")

    frame = pd.DataFrame({"schema_version": TRACE_SCHEMA_VERSION, "phase": raw["phase"]})
    for col in _NUMERIC:
        text = raw[col].str.strip()
        values = pd.to_numeric(text, errors="coerce")
        broken = values.isna() & (text != "")
        if col in _INTEGER:
            broken |= text == ""
        if broken.any():
            i = raw.index[broken][0]
            raise TraceFormatError(f"{path}: line {i + 2}: column {col!r} has bad value {raw.at[i, col]!r}")
        frame[col] = values
    frame = frame[TRACE_COLUMNS]

    grads = frame["gradient_calls_per_chain"].to_numpy()
    drops = np.flatnonzero(np.diff(grads) < 0)
    if len(drops):
        raise TraceFormatError(f"{path}: line {drops[0] + 3}: gradient_calls_per_chain decreases")
    return frame


def switch_row(trace: pd.DataFrame) -> Optional[Dict[str, Any]]:
    """Where the adjusted phase begins: the last unadjusted iteration, or the initial state."""
    adjusted = trace.index[trace["phase"] == Phase.ADJUSTED.value]
    if not len(adjusted):
        return None
    unadjusted = trace[trace["phase"] == Phase.UNADJUSTED.value]
    if unadjusted.empty:
        iteration, grads = 0, 1
    else:
        last = unadjusted.iloc[-1]
        iteration, grads = int(last["iteration"]), int(last["gradient_calls_per_chain"])
    return {
        "series": SWITCH_MARKER,
        "iteration": iteration,
        "gradient_calls_per_chain": grads,
        "value": np.nan,
        "phase": Phase.ADJUSTED.value,
    }


def plot_data(trace: pd.DataFrame) -> pd.DataFrame:
    """Long-format series keyed by gradient calls, one row per iteration per series."""
    long = trace.melt(
        id_vars=["iteration", "gradient_calls_per_chain", "phase"],
        value_vars=PLOT_SERIES,
        var_name="series",
        value_name="value",
    )
    long["series"] = pd.Categorical(long["series"], categories=PLOT_SERIES, ordered=True)
    long = long.sort_values(["series", "iteration"], kind="stable")
    long["series"] = long["series"].astype(str)
    rows: List[pd.DataFrame] = [long[PLOT_COLUMNS]]
    marker = switch_row(trace)
    if marker is not None:
        rows.append(pd.DataFrame([marker], columns=PLOT_COLUMNS))
    return pd.concat(rows, ignore_index=True)


def write_plot_data(trace_path, out_path=None) -> Path:
    trace = read_trace(trace_path)
    out = Path(out_path) if out_path else Path(trace_path).with_name("plotdata.csv")
    plot_data(trace).to_csv(out, index=False, na_rep="", lineterminator="\n")
    return out
