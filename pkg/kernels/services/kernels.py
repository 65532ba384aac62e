from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from integrators.services.dynamics import ChainState, StepResult, full_refresh, mclmc_step
from integrators.services.schemes import IntegratorScheme

DEFAULT_STEPS_PER_PROPOSAL = 15
# partial-refresh scale relative to the trajectory length N * eps
PARTIAL_REFRESH_FACTOR = 1.25


class KernelConfigError(ValueError):
    pass


def default_acceptance(scheme: IntegratorScheme) -> float:
    return 0.9 if scheme.order >= 4 else 0.7


@dataclass(frozen=True)
class UnadjustedKernelConfig:
    step_size: float
    decoherence: float
    scheme: IntegratorScheme

    def __post_init__(self):
        if not self.step_size > 0:
            raise KernelConfigError(f"step_size must be positive, got {self.step_size}.")
        if not self.decoherence > 0:
            raise KernelConfigError(f"decoherence must be positive, got {self.decoherence}.")


@dataclass(frozen=True)
class AdjustedKernelConfig:
    step_size: float
    steps_per_proposal: int
    partial_decoherence: float
    target_acceptance: float
    scheme: IntegratorScheme

    def __post_init__(self):
        if not self.step_size > 0:
            raise KernelConfigError(f"step_size must be positive, got {self.step_size}.")
        if int(self.steps_per_proposal) < 1:
            raise KernelConfigError(f"steps_per_proposal must be >= 1, got {self.steps_per_proposal}.")
        if not self.partial_decoherence > 0:
            raise KernelConfigError(f"partial_decoherence must be positive, got {self.partial_decoherence}.")
        if not 0.0 < self.target_acceptance < 1.0:
            raise KernelConfigError(f"target_acceptance must lie in (0, 1), got {self.target_acceptance}.")

    @classmethod
    def for_step_size(
        cls,
        step_size: float,
        scheme: IntegratorScheme,
        *,
        steps_per_proposal: int = DEFAULT_STEPS_PER_PROPOSAL,
        partial_refresh_factor: float = PARTIAL_REFRESH_FACTOR,
        target_acceptance: Optional[float] = None,
    ) -> "AdjustedKernelConfig":
        """L_partial = factor * N * eps, recomputed for every new eps."""
        return cls(
            step_size=float(step_size),
            steps_per_proposal=int(steps_per_proposal),
            partial_decoherence=partial_refresh_factor * steps_per_proposal * float(step_size),
            target_acceptance=default_acceptance(scheme) if target_acceptance is None else float(target_acceptance),
            scheme=scheme,
        )

    def with_step_size(self, step_size: float, partial_refresh_factor: float = PARTIAL_REFRESH_FACTOR):
        return AdjustedKernelConfig.for_step_size(
            step_size,
            self.scheme,
            steps_per_proposal=self.steps_per_proposal,
            partial_refresh_factor=partial_refresh_factor,
            target_acceptance=self.target_acceptance,
        )

    @property
    def gradient_calls(self) -> int:
        return self.steps_per_proposal * self.scheme.gradients_per_step


@dataclass
class ProposalOutcome:
    state: ChainState
    accepted: np.ndarray
    energy_change: np.ndarray
    gradient_calls: int
    divergent: np.ndarray

    @classmethod
    def concatenate(cls, parts: Sequence["ProposalOutcome"]) -> "ProposalOutcome":
        return cls(
            ChainState.concatenate([p.state for p in parts]),
            np.concatenate([p.accepted for p in parts]),
            np.concatenate([p.energy_change for p in parts]),
            parts[0].gradient_calls,
            np.concatenate([p.divergent for p in parts]),
        )


def unadjusted_kernel(state: ChainState, cfg: UnadjustedKernelConfig, target, streams) -> StepResult:
    return mclmc_step(state, cfg.step_size, cfg.decoherence, cfg.scheme, target, streams)


def mams_kernel(state: ChainState, cfg: AdjustedKernelConfig, target, streams) -> ProposalOutcome:
    """
    One Metropolis-adjusted proposal per chain.

    Stream order per chain: the full velocity refresh, two partial refreshes
    per integrator step, then one uniform for the accept test. On rejection
    the position and its cached density/gradient are restored; the velocity
    is left as proposed since the next proposal refreshes it anyway.
    """
    start = state
    proposal = full_refresh(state, streams)

    total = np.zeros(state.size)
    divergent = np.zeros(state.size, dtype=bool)
    for _ in range(cfg.steps_per_proposal):
        step = mclmc_step(proposal, cfg.step_size, cfg.partial_decoherence, cfg.scheme, target, streams)
        proposal = step.new_state
        total = total + step.energy_change
        divergent |= step.divergent

    energy = np.where(divergent, np.inf, total)
    uniforms = np.array([rng.random() for rng in streams])
    with np.errstate(divide="ignore", invalid="ignore"):
        log_u = np.log(uniforms)
        accepted = log_u < -energy

    acc = accepted[:, None]
    new_state = ChainState(
        x=np.where(acc, proposal.x, start.x),
        u=proposal.u,
        log_density=np.where(accepted, proposal.log_density, start.log_density),
        gradient=np.where(acc, proposal.gradient, start.gradient),
    )
    return ProposalOutcome(new_state, accepted, energy, cfg.gradient_calls, divergent)

