"""
Two-phase ensemble sampler.

Phase 1 runs unadjusted microcanonical Langevin steps on all chains and
retunes the step size and decoherence scale from ensemble statistics after
every step. When the ensemble means of x_i^2 stop fluctuating (or at
maxiter) the target is diagonally preconditioned and phase 2 starts:
Metropolis-adjusted proposals whose step size is bisected to the target
acceptance rate and then frozen for the rest of the run.

Typical use:

    target, truth, init = build_target("banana")
    cfg = AdaptationConfig.from_settings(maxiter=300)
    result = laps_run(target, init, chains=4096, config=cfg, seed=7, ground_truth=truth)
"""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np
from django.conf import settings

from diagnostics.services.bias import bias
from diagnostics.services.records import Phase, RunRecord
from integrators.services.dynamics import StepResult, aligned_velocity, init_state
from integrators.services.schemes import IntegratorScheme, adjusted_scheme_for, get_scheme
from kernels.services.kernels import (
    DEFAULT_STEPS_PER_PROPOSAL,
    PARTIAL_REFRESH_FACTOR,
    AdjustedKernelConfig,
    ProposalOutcome,
    UnadjustedKernelConfig,
    mams_kernel,
    unadjusted_kernel,
)
from targets.services.distributions import GroundTruth, InitialDistribution, TargetDistribution

from .bisection import StepSizeBisection
from .ensemble import ChainExecutor, EnsembleError, EnsembleState, chain_streams, probe_stream
from .equipartition import equipartition_diag, equipartition_full
from .preconditioning import Preconditioner, precondition
from .schedule import (
    STEP_CHANGE_CLAMP,
    FluctuationMonitor,
    decoherence_update,
    desired_eevpd,
    eevpd,
    initial_step_size,
    step_size_update,
)

logger = logging.getLogger(__name__)


class EquipartitionMode(str, Enum):
    DIAGONAL = "diagonal"
    FULL_RANK = "full_rank"

    @classmethod
    def parse(cls, value) -> "EquipartitionMode":
        if isinstance(value, cls):
            return value
        key = str(value or "").strip().lower()
        if key in ("diag", "diagonal"):
            return cls.DIAGONAL
        if key in ("full", "full_rank", "full-rank"):
            return cls.FULL_RANK
        raise EnsembleError(f"Unknown equipartition mode '{value}'. Use 'diag' or 'full'.")


@dataclass(frozen=True)
class AdaptationConfig:
    C: float = 0.025
    alpha: float = 2.0
    fluctuation_threshold: float = 0.01
    window_fraction: float = 0.2
    # None picks 0.7 for second-order and 0.9 for fourth-order adjusted schemes
    target_acceptance: Optional[float] = None
    acceptance_tolerance: float = 0.03
    maxiter: int = 1000
    equipartition_mode: EquipartitionMode = EquipartitionMode.DIAGONAL
    hutchinson_probes: int = 100
    step_change_clamp: Tuple[float, float] = STEP_CHANGE_CLAMP
    # fraction of divergent chains above which eps is halved
    divergence_limit: float = 0.01
    unadjusted_integrator: str = "lf"
    # None picks mn2 (d <= 200) or mn4
    adjusted_integrator: Optional[str] = None
    steps_per_proposal: int = DEFAULT_STEPS_PER_PROPOSAL
    partial_refresh_factor: float = PARTIAL_REFRESH_FACTOR
    # ablations
    switch_after: Optional[int] = None
    fixed_step_size: Optional[float] = None
    adjusted: bool = True
    preconditioning: bool = True
    block_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, "equipartition_mode", EquipartitionMode.parse(self.equipartition_mode))
        object.__setattr__(self, "step_change_clamp", tuple(float(c) for c in self.step_change_clamp))
        if not 0.0 < self.C < 1.0:
            raise EnsembleError(f"C must lie in (0, 1), got {self.C}.")
        if not self.alpha > 0:
            raise EnsembleError(f"alpha must be positive, got {self.alpha}.")
        if not self.fluctuation_threshold > 0:
            raise EnsembleError(f"fluctuation_threshold must be positive, got {self.fluctuation_threshold}.")
        if not 0.0 < self.window_fraction < 1.0:
            raise EnsembleError(f"window_fraction must lie in (0, 1), got {self.window_fraction}.")
        if self.target_acceptance is not None and not 0.0 < self.target_acceptance < 1.0:
            raise EnsembleError(f"target_acceptance must lie in (0, 1), got {self.target_acceptance}.")
        if int(self.maxiter) < 1:
            raise EnsembleError(f"maxiter must be >= 1, got {self.maxiter}.")
        if int(self.hutchinson_probes) < 1:
            raise EnsembleError(f"hutchinson_probes must be >= 1, got {self.hutchinson_probes}.")
        low, high = self.step_change_clamp
        if not 0.0 < low <= 1.0 <= high:
            raise EnsembleError(f"step_change_clamp must satisfy 0 < low <= 1 <= high, got {self.step_change_clamp}.")
        if self.switch_after is not None and int(self.switch_after) < 0:
            raise EnsembleError(f"switch_after must be >= 0, got {self.switch_after}.")
        if self.fixed_step_size is not None and not self.fixed_step_size > 0:
            raise EnsembleError(f"fixed_step_size must be positive, got {self.fixed_step_size}.")
        if int(self.steps_per_proposal) < 1:
            raise EnsembleError(f"steps_per_proposal must be >= 1, got {self.steps_per_proposal}.")
        if not self.partial_refresh_factor > 0:
            raise EnsembleError(f"partial_refresh_factor must be positive, got {self.partial_refresh_factor}.")
        get_scheme(self.unadjusted_integrator)
        if self.adjusted_integrator is not None:
            get_scheme(self.adjusted_integrator)

    @classmethod
    def from_settings(cls, **overrides) -> "AdaptationConfig":
        base = cls(
            C=settings.LAPS_C,
            alpha=settings.LAPS_ALPHA,
            fluctuation_threshold=settings.LAPS_FLUCTUATION_THRESHOLD,
            window_fraction=settings.LAPS_WINDOW_FRACTION,
            acceptance_tolerance=settings.LAPS_ACCEPTANCE_TOLERANCE,
            maxiter=settings.LAPS_MAXITER,
            equipartition_mode=settings.LAPS_EQUIPARTITION,
            hutchinson_probes=settings.LAPS_HUTCHINSON_PROBES,
            block_size=settings.LAPS_BLOCK_SIZE,
        )
        return replace(base, **{k: v for k, v in overrides.items() if v is not None})

    def adjusted_scheme(self, d: int) -> IntegratorScheme:
        if self.adjusted_integrator is None:
            return adjusted_scheme_for(d)
        return get_scheme(self.adjusted_integrator)


@dataclass
class LapsResult:
    ensemble: EnsembleState
    records: List[RunRecord]
    preconditioner: Preconditioner
    adjusted_step_size: Optional[float] = None
    switch_iteration: Optional[int] = None
    ground_truth: Optional[GroundTruth] = field(default=None, repr=False)

    @property
    def positions(self) -> np.ndarray:
        """Final chain positions in the target's original coordinates."""
        return self.preconditioner.to_original(self.ensemble.chains.x)

    @property
    def final_bias(self):
        return bias(self.positions, self.ground_truth, phase=self.records[-1].phase) if self.records else None


class LapsSampler:
    def __init__(
        self,
        target: TargetDistribution,
        initial: InitialDistribution,
        chains: int,
        config: Optional[AdaptationConfig] = None,
        seed: int = 0,
        workers: Optional[int] = None,
        ground_truth: Optional[GroundTruth] = None,
        on_record: Optional[Callable[[RunRecord], None]] = None,
    ):
        if int(chains) < 2:
            raise EnsembleError(f"Need at least 2 chains, got {chains}.")
        if target.dimension < 2:
            raise EnsembleError(f"The sampler needs d >= 2, target '{target.name}' has d={target.dimension}.")
        if initial.dimension != target.dimension:
            raise EnsembleError(
                f"Initial distribution has d={initial.dimension} but target '{target.name}' has d={target.dimension}."
            )
        self.target = target
        self.initial = initial
        self.chains = int(chains)
        self.config = config or AdaptationConfig()
        self.seed = int(seed)
        self.workers = workers
        self.ground_truth = ground_truth
        self.on_record = on_record
        self.records: List[RunRecord] = []

    # ---- helpers ----

    def _emit(self, record: RunRecord):
        self.records.append(record)
        if self.on_record is not None:
            self.on_record(record)

    def _equipartition(self, ensemble: EnsembleState, t: int) -> float:
        x, g = ensemble.chains.x, ensemble.chains.gradient
        if self.config.equipartition_mode is EquipartitionMode.FULL_RANK:
            return equipartition_full(x, g, self.config.hutchinson_probes, rng=probe_stream(self.seed, t))
        return equipartition_diag(x, g)

    def _bias(self, x_original: np.ndarray, ensemble: EnsembleState, phase: Phase):
        return bias(
            x_original,
            self.ground_truth,
            gradient_calls_per_chain=ensemble.gradient_calls_per_chain,
            iteration=ensemble.iteration,
            phase=phase,
        )

    def _initial_ensemble(self) -> EnsembleState:
        streams = chain_streams(self.seed, self.chains)
        x = np.stack([self.initial.draw(rng) for rng in streams])
        state, divergent = init_state(x, np.zeros_like(x), self.target)
        if np.any(divergent):
            raise EnsembleError(
                f"{int(divergent.sum())} initial position(s) have a non-finite log density or gradient."
            )
        state.u = aligned_velocity(state.gradient, streams)
        return EnsembleState(chains=state, streams=streams, gradient_calls_per_chain=1)

    # ---- phase 1 ----

    def _unadjusted_phase(self, ensemble: EnsembleState, executor: ChainExecutor) -> Tuple[float, float, bool]:
        cfg = self.config
        d = ensemble.dimension
        scheme = get_scheme(cfg.unadjusted_integrator)
        eps = cfg.fixed_step_size or initial_step_size(d)
        L = decoherence_update(ensemble.chains.x, cfg.alpha, cfg.alpha * math.sqrt(d))
        monitor = FluctuationMonitor.for_run(d, cfg.maxiter, cfg.window_fraction)

        limit = cfg.maxiter if cfg.switch_after is None else min(cfg.maxiter, int(cfg.switch_after))
        converged = False
        while ensemble.iteration < limit:
            kernel_cfg = UnadjustedKernelConfig(eps, L, scheme)
            parts = executor.map(
                lambda block, streams: unadjusted_kernel(block, kernel_cfg, self.target, streams),
                ensemble.chains,
                ensemble.streams,
            )
            step = StepResult.concatenate(parts)
            ensemble.chains = step.new_state
            ensemble.divergent = step.divergent
            ensemble.iteration += 1
            ensemble.gradient_calls_per_chain += step.gradient_calls

            # barrier: every reduction below runs on the assembled ensemble
            divergent_fraction = float(np.mean(step.divergent))
            observed = eevpd(step.energy_change, d, step.divergent)
            D = self._equipartition(ensemble, ensemble.iteration)
            wanted = desired_eevpd(D, cfg.C)
            delta_max = monitor.update(ensemble.chains.x)

            self._emit(
                RunRecord(
                    iteration=ensemble.iteration,
                    phase=Phase.UNADJUSTED,
                    step_size=eps,
                    decoherence=L,
                    gradient_calls_per_chain=ensemble.gradient_calls_per_chain,
                    divergent_fraction=divergent_fraction,
                    eevpd=observed,
                    eevpd_wanted=wanted,
                    equipartition=D,
                    max_fluctuation=delta_max,
                    bias=self._bias(ensemble.chains.x, ensemble, Phase.UNADJUSTED),
                )
            )
            logger.debug(
                "t=%d eps=%.4g L=%.4g eevpd=%.3g wanted=%.3g D=%.3g delta=%.3g",
                ensemble.iteration, eps, L, observed, wanted, D, delta_max,
            )

            if cfg.fixed_step_size is None:
                if divergent_fraction > cfg.divergence_limit:
                    eps = eps / 2.0
                else:
                    eps = step_size_update(eps, D, observed, cfg.C, cfg.step_change_clamp)
            L = decoherence_update(ensemble.chains.x, cfg.alpha, L)
            ensemble.adaptation_reductions += 1

            if cfg.adjusted and cfg.switch_after is None and delta_max <= cfg.fluctuation_threshold:
                converged = True
                break

        if cfg.adjusted and not converged and cfg.switch_after is None:
            logger.warning(
                "unadjusted phase hit maxiter=%d before the fluctuation dropped below %g; switching anyway",
                cfg.maxiter, cfg.fluctuation_threshold,
            )
        return eps, L, converged

    # ---- phase 2 ----

    def _proposal_round(self, ensemble, kernel_cfg, target, executor) -> ProposalOutcome:
        parts = executor.map(
            lambda block, streams: mams_kernel(block, kernel_cfg, target, streams),
            ensemble.chains,
            ensemble.streams,
        )
        outcome = ProposalOutcome.concatenate(parts)
        ensemble.chains = outcome.state
        ensemble.divergent = outcome.divergent
        ensemble.iteration += 1
        ensemble.gradient_calls_per_chain += outcome.gradient_calls
        return outcome

    def _adjusted_record(self, ensemble, kernel_cfg, outcome, acceptance, pre: Preconditioner) -> RunRecord:
        return RunRecord(
            iteration=ensemble.iteration,
            phase=Phase.ADJUSTED,
            step_size=kernel_cfg.step_size,
            decoherence=kernel_cfg.partial_decoherence,
            gradient_calls_per_chain=ensemble.gradient_calls_per_chain,
            divergent_fraction=float(np.mean(outcome.divergent)),
            equipartition=self._equipartition(ensemble, ensemble.iteration),
            acceptance=acceptance,
            bias=self._bias(pre.to_original(ensemble.chains.x), ensemble, Phase.ADJUSTED),
        )

    def _adjusted_phase(self, ensemble: EnsembleState, eps: float, executor: ChainExecutor):
        cfg = self.config
        d = ensemble.dimension
        if cfg.preconditioning:
            target, pre, ensemble.chains = precondition(ensemble.chains, self.target)
            ensemble.adaptation_reductions += 1
            eps = eps / pre.rms_scale
        else:
            target, pre = self.target, Preconditioner.identity(d)

        scheme = cfg.adjusted_scheme(d)
        kernel_cfg = AdjustedKernelConfig.for_step_size(
            eps,
            scheme,
            steps_per_proposal=cfg.steps_per_proposal,
            partial_refresh_factor=cfg.partial_refresh_factor,
            target_acceptance=cfg.target_acceptance,
        )
        search = StepSizeBisection(eps, kernel_cfg.target_acceptance, cfg.acceptance_tolerance)
        logger.info(
            "adjusted phase: %s, N=%d, eps=%.4g, target acceptance %.2f",
            scheme.name, kernel_cfg.steps_per_proposal, eps, kernel_cfg.target_acceptance,
        )

        # tuning always completes, even past maxiter
        while not search.frozen:
            outcome = self._proposal_round(ensemble, kernel_cfg, target, executor)
            acceptance = float(np.mean(outcome.accepted))
            ensemble.adaptation_reductions += 1
            self._emit(self._adjusted_record(ensemble, kernel_cfg, outcome, acceptance, pre))
            next_eps = search.observe(acceptance)
            kernel_cfg = kernel_cfg.with_step_size(next_eps, cfg.partial_refresh_factor)
        logger.info("froze eps=%.4g after %d proposal rounds", kernel_cfg.step_size, len(search.history))

        while ensemble.iteration < cfg.maxiter:
            outcome = self._proposal_round(ensemble, kernel_cfg, target, executor)
            self._emit(
                self._adjusted_record(ensemble, kernel_cfg, outcome, float(np.mean(outcome.accepted)), pre)
            )
        return pre, kernel_cfg.step_size

    def run(self) -> LapsResult:
        cfg = self.config
        self.records = []
        ensemble = self._initial_ensemble()
        if self.ground_truth is None:
            logger.warning("no ground truth for target '%s'; bias is not reported", self.target.name)

        with ChainExecutor(self.workers, cfg.block_size) as executor:
            eps, _, _ = self._unadjusted_phase(ensemble, executor)
            if not cfg.adjusted:
                return LapsResult(ensemble, self.records, Preconditioner.identity(ensemble.dimension),
                                  ground_truth=self.ground_truth)
            switch_iteration = ensemble.iteration
            logger.info("switching to the adjusted phase at t=%d (eps=%.4g)", switch_iteration, eps)
            pre, frozen_eps = self._adjusted_phase(ensemble, eps, executor)

        return LapsResult(
            ensemble=ensemble,
            records=self.records,
            preconditioner=pre,
            adjusted_step_size=frozen_eps,
            switch_iteration=switch_iteration,
            ground_truth=self.ground_truth,
        )


def laps_run(
    target: TargetDistribution,
    initial: InitialDistribution,
    chains: int,
    config: Optional[AdaptationConfig] = None,
    seed: int = 0,
    *,
    workers: Optional[int] = None,
    ground_truth: Optional[GroundTruth] = None,
    on_record: Optional[Callable[[RunRecord], None]] = None,
) -> LapsResult:
    return LapsSampler(target, initial, chains, config, seed, workers, ground_truth, on_record).run()
