"""
Hyperparameter schedule of the unadjusted phase.

The step size is driven by the energy error variance per dimension (EEVPD):
the wanted EEVPD is F(C * D) where D is the current equipartition loss, and
EEVPD scales roughly as eps^6, hence the 1/6 exponent. The decoherence scale
follows the ensemble spread, and a fluctuation monitor decides when the
ensemble has stopped moving.
"""
import logging
import math
from collections import deque
from typing import Deque, Optional, Tuple

import numpy as np
from scipy import optimize

from .ensemble import EnsembleError, ensemble_variance

logger = logging.getLogger(__name__)

STEP_CHANGE_CLAMP = (0.3, 3.0)
# more than this fraction of divergent chains makes the EEVPD meaningless
EEVPD_DIVERGENCE_LIMIT = 0.5


def eevpd(energy_changes, d: int, divergent: Optional[np.ndarray] = None) -> float:
    """Variance over chains of the per-step energy error, divided by d."""
    delta = np.asarray(energy_changes, dtype=float)
    if delta.shape[0] < 2:
        raise EnsembleError(f"EEVPD needs at least 2 chains, got {delta.shape[0]}.")
    bad = ~np.isfinite(delta)
    if divergent is not None:
        bad |= np.asarray(divergent, dtype=bool)
    if bad.mean() > EEVPD_DIVERGENCE_LIMIT:
        return math.inf
    kept = delta[~bad]
    if kept.shape[0] < 2:
        return math.inf
    return float(np.var(kept, ddof=1) / d)


def bias_bound(equipartition: float) -> float:
    """F(D) = 4 D^(3/2) / (1 + D^(1/2))^2, increasing with F(0) = 0."""
    D = float(equipartition)
    if D < 0 or math.isnan(D):
        raise EnsembleError(f"Equipartition loss must be non-negative, got {equipartition}.")
    if math.isinf(D):
        return math.inf
    root = math.sqrt(D)
    return 4.0 * D * root / (1.0 + root) ** 2


def bias_bound_inverse(value: float, rtol: float = 1e-10) -> float:
    """Solve F(D) = value for D by bracketing bisection."""
    y = float(value)
    if y < 0 or math.isnan(y):
        raise EnsembleError(f"Bias bound must be non-negative, got {value}.")
    if y == 0.0:
        return 0.0
    if math.isinf(y):
        return math.inf

    hi = 1.0
    while bias_bound(hi) < y:
        hi *= 2.0
    lo = hi / 2.0
    while lo > 0.0 and bias_bound(lo) > y:
        hi, lo = lo, lo / 2.0
    return float(optimize.bisect(lambda D: bias_bound(D) - y, lo, hi, xtol=1e-300, rtol=rtol, maxiter=500))


def desired_eevpd(equipartition: float, C: float) -> float:
    return bias_bound(C * equipartition)


def step_size_update(
    step_size: float,
    equipartition: float,
    eevpd_observed: float,
    C: float = 0.025,
    clamp: Tuple[float, float] = STEP_CHANGE_CLAMP,
) -> float:
    """
    eps' = eps * clamp((EEVPD_wanted / EEVPD_observed)^(1/6), low, high).
    An infinite (or NaN) observation halves the step size.
    """
    observed = float(eevpd_observed)
    if math.isnan(observed) or math.isinf(observed):
        return step_size / 2.0
    wanted = desired_eevpd(equipartition, C)
    if math.isinf(wanted):
        return step_size * clamp[1]
    if observed == 0.0:
        return step_size if wanted == 0.0 else step_size * clamp[1]
    ratio = (wanted / observed) ** (1.0 / 6.0)
    return step_size * min(max(ratio, clamp[0]), clamp[1])


def decoherence_update(x: np.ndarray, alpha: float, previous: float) -> float:
    """L = alpha * sqrt(sum_i Var[x_i]); keeps the previous L for a collapsed ensemble."""
    total = float(np.sum(ensemble_variance(x, "decoherence scale")))
    if not total > 0 or not math.isfinite(total):
        logger.debug("degenerate ensemble spread (%s); keeping L = %s", total, previous)
        return previous
    return alpha * math.sqrt(total)


def initial_step_size(d: int) -> float:
    return 0.01 * math.sqrt(d)


class FluctuationMonitor:
    """
    Relative fluctuation sigma/mu of the ensemble means of x_i^2 over a
    moving window of the last T iterations. Only the d-vectors of means are
    kept, never chain states. Reports +inf until T observations have been
    seen; with T == 1 the fluctuation is zero.
    """

    def __init__(self, dimension: int, window: int):
        self.dimension = int(dimension)
        self.window = max(1, int(window))
        self.count = 0
        self._history: Deque[np.ndarray] = deque(maxlen=self.window)

    @classmethod
    def for_run(cls, dimension: int, maxiter: int, window_fraction: float) -> "FluctuationMonitor":
        return cls(dimension, round(window_fraction * maxiter))

    def update(self, x: np.ndarray) -> float:
        moments = np.mean(np.asarray(x, dtype=float) ** 2, axis=0)
        return self.observe(moments)

    def observe(self, moments: np.ndarray) -> float:
        self._history.append(np.asarray(moments, dtype=float).copy())
        self.count += 1
        return self.max_fluctuation

    @property
    def mean(self) -> np.ndarray:
        if not self._history:
            return np.zeros(self.dimension)
        return np.mean(self._history, axis=0)

    @property
    def std(self) -> np.ndarray:
        if len(self._history) < 2:
            return np.zeros(self.dimension)
        return np.std(self._history, axis=0, ddof=1)

    @property
    def fluctuations(self) -> np.ndarray:
        if self.count < self.window:
            return np.full(self.dimension, np.inf)
        mean = self.mean
        with np.errstate(divide="ignore", invalid="ignore"):
            delta = self.std / np.abs(mean)
        return np.where((mean == 0.0) | ~np.isfinite(delta), np.inf, delta)

    @property
    def max_fluctuation(self) -> float:
        return float(np.max(self.fluctuations))
