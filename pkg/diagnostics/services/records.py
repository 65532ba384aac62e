from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional

import numpy as np

TRACE_SCHEMA_VERSION = 1

# stable trace column order
TRACE_COLUMNS = [
    "schema_version",
    "iteration",
    "phase",
    "step_size",
    "decoherence",
    "eevpd",
    "eevpd_wanted",
    "equipartition",
    "max_fluctuation",
    "acceptance",
    "gradient_calls_per_chain",
    "divergent_fraction",
    "b2_max",
    "b2_avg",
]


class Phase(str, Enum):
    UNADJUSTED = "unadjusted"
    ADJUSTED = "adjusted"


@dataclass(frozen=True)
class BiasReport:
    per_coordinate: np.ndarray
    b2_max: float
    b2_avg: float
    gradient_calls_per_chain: int
    iteration: int
    phase: Phase


@dataclass(frozen=True)
class RunRecord:
    iteration: int
    phase: Phase
    step_size: float
    decoherence: float
    gradient_calls_per_chain: int
    divergent_fraction: float
    eevpd: Optional[float] = None
    eevpd_wanted: Optional[float] = None
    equipartition: Optional[float] = None
    max_fluctuation: Optional[float] = None
    acceptance: Optional[float] = None
    bias: Optional[BiasReport] = None

    @property
    def b2_max(self) -> Optional[float]:
        return None if self.bias is None else self.bias.b2_max

    @property
    def b2_avg(self) -> Optional[float]:
        return None if self.bias is None else self.bias.b2_avg

    def as_row(self) -> Dict[str, Any]:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "iteration": self.iteration,
            "phase": self.phase.value,
            "step_size": self.step_size,
            "decoherence": self.decoherence,
            "eevpd": self.eevpd,
            "eevpd_wanted": self.eevpd_wanted,
            "equipartition": self.equipartition,
            "max_fluctuation": self.max_fluctuation,
            "acceptance": self.acceptance,
            "gradient_calls_per_chain": self.gradient_calls_per_chain,
            "divergent_fraction": self.divergent_fraction,
            "b2_max": self.b2_max,
            "b2_avg": self.b2_avg,
        }
