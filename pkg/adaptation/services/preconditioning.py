import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from integrators.services.dynamics import ChainState
from targets.services.distributions import TargetDistribution

from .ensemble import ensemble_variance

logger = logging.getLogger(__name__)

SCALE_FLOOR = 1e-12


@dataclass(frozen=True)
class Preconditioner:
    """Diagonal rescaling y = x / s. Diagnostics always read x = s * y."""

    scales: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scales, dtype=float)
        low = ~(s >= SCALE_FLOOR)
        if np.any(low):
            logger.warning("floored %d preconditioner scale(s) below %g", int(low.sum()), SCALE_FLOOR)
            s = np.where(low, SCALE_FLOOR, s)
        object.__setattr__(self, "scales", s)

    @classmethod
    def identity(cls, d: int) -> "Preconditioner":
        return cls(np.ones(d))

    @property
    def rms_scale(self) -> float:
        return float(np.sqrt(np.mean(self.scales ** 2)))

    def to_transformed(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) / self.scales

    def to_original(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) * self.scales

    def transform_state(self, state: ChainState) -> ChainState:
        """Chain positions into y coordinates; log p is unchanged, gradients pick up a factor s."""
        u = state.u / self.scales
        norms = np.linalg.norm(u, axis=-1, keepdims=True)
        u = np.where(norms > 0, u / np.where(norms > 0, norms, 1.0), state.u)
        return ChainState(
            x=self.to_transformed(state.x),
            u=u,
            log_density=state.log_density.copy(),
            gradient=state.gradient * self.scales,
        )


def precondition(state: ChainState, target: TargetDistribution) -> Tuple[TargetDistribution, Preconditioner, ChainState]:
    """s_i = sqrt(Var[x_i]) over the ensemble; returns the wrapped target, s and the moved chains."""
    scales = np.sqrt(ensemble_variance(state.x, "preconditioner"))
    pre = Preconditioner(scales)
    return target.rescaled(pre.scales), pre, pre.transform_state(state)
