from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np


class TargetError(ValueError):
    pass


BatchFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TargetDistribution:
    """
    Unnormalized target density p(x) on R^d.

    `log_density_fn` and `gradient_fn` are batched: they take an (n, d) array
    of positions and return (n,) log densities and (n, d) gradients of log p.
    They must be pure functions of their input; chains are evaluated
    concurrently from several threads.
    """

    name: str
    dimension: int
    log_density_fn: BatchFn
    gradient_fn: BatchFn
    exact_sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None
    params: Dict[str, Any] = field(default_factory=dict)
    # descriptive arrays (e.g. a Gaussian covariance); never serialized
    extras: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if int(self.dimension) < 1:
            raise TargetError(f"Target '{self.name}' has invalid dimension {self.dimension}.")

    def _batch(self, x) -> Tuple[np.ndarray, bool]:
        arr = np.asarray(x, dtype=float)
        single = arr.ndim == 1
        arr = np.atleast_2d(arr)
        if arr.shape[-1] != self.dimension:
            raise TargetError(
                f"Target '{self.name}' expects points of dimension {self.dimension}, got {arr.shape[-1]}."
            )
        return arr, single

    def log_density(self, x) -> np.ndarray:
        arr, single = self._batch(x)
        out = np.asarray(self.log_density_fn(arr), dtype=float)
        return out[0] if single else out

    def gradient(self, x) -> np.ndarray:
        arr, single = self._batch(x)
        out = np.asarray(self.gradient_fn(arr), dtype=float)
        return out[0] if single else out

    def evaluate(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """log p and its gradient for a batch; one gradient call per row."""
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return (
                np.asarray(self.log_density_fn(x), dtype=float),
                np.asarray(self.gradient_fn(x), dtype=float),
            )

    def rescaled(self, scales: np.ndarray) -> "TargetDistribution":
        """The same density in coordinates y = x / scales."""
        s = np.asarray(scales, dtype=float)

        def log_density(y):
            return self.log_density_fn(y * s)

        def gradient(y):
            return self.gradient_fn(y * s) * s

        return TargetDistribution(
            name=f"{self.name}[preconditioned]",
            dimension=self.dimension,
            log_density_fn=log_density,
            gradient_fn=gradient,
            params=dict(self.params),
        )


class GroundTruthSource(str, Enum):
    ANALYTIC = "analytic"
    DIRECT_SAMPLING = "direct-sampling-oracle"


@dataclass(frozen=True)
class GroundTruth:
    second_moments: np.ndarray
    second_moment_variances: np.ndarray
    source: GroundTruthSource = GroundTruthSource.ANALYTIC

    def __post_init__(self):
        m = np.asarray(self.second_moments, dtype=float)
        v = np.asarray(self.second_moment_variances, dtype=float)
        if m.shape != v.shape or m.ndim != 1:
            raise TargetError("Ground-truth moments and variances must be vectors of equal length.")
        if not np.all(v > 0):
            raise TargetError("Ground-truth variances must be strictly positive.")
        object.__setattr__(self, "second_moments", m)
        object.__setattr__(self, "second_moment_variances", v)

    @property
    def dimension(self) -> int:
        return int(self.second_moments.shape[0])


@dataclass(frozen=True)
class InitialDistribution:
    dimension: int
    sampler: Callable[[np.random.Generator], np.ndarray]

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        x = np.asarray(self.sampler(rng), dtype=float)
        if x.shape != (self.dimension,):
            raise TargetError(f"Initial draw has shape {x.shape}, expected ({self.dimension},).")
        if not np.all(np.isfinite(x)):
            raise TargetError("Initial draw contains non-finite entries.")
        return x


def standard_normal_start(d: int, scale: float = 1.0) -> InitialDistribution:
    return InitialDistribution(dimension=d, sampler=lambda rng: scale * rng.standard_normal(d))
