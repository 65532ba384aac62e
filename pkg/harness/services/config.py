import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from django.conf import settings

from adaptation.services.ensemble import EnsembleError
from adaptation.services.laps import AdaptationConfig, EquipartitionMode
from targets.services.distributions import GroundTruth, InitialDistribution, TargetDistribution
from targets.services.registry import build_target


class RunConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """
    Everything a run needs. Only `target` has no default; the rest resolve
    from settings, then a JSON config file, then command-line flags.
    """

    target: str
    dim: Optional[int] = None
    condition: Optional[float] = None
    target_seed: int = 0
    chains: int = 4096
    seed: int = 0
    maxiter: int = 1000
    workers: int = 0
    # adjusted-phase integrator; None chooses by dimension
    integrator: Optional[str] = None
    unadjusted_integrator: str = "lf"
    equipartition: str = "diagonal"
    alpha: float = 2.0
    C: float = 0.025
    acc_target: Optional[float] = None
    switch_after: Optional[int] = None
    # adjusted-phase ablations
    preconditioning: bool = True
    steps_per_proposal: Optional[int] = None
    partial_refresh_factor: Optional[float] = None
    out: Optional[str] = None

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def defaults(cls) -> Dict[str, Any]:
        return {
            "chains": settings.LAPS_CHAINS,
            "seed": settings.LAPS_SEED,
            "maxiter": settings.LAPS_MAXITER,
            "workers": settings.LAPS_WORKERS,
            "equipartition": settings.LAPS_EQUIPARTITION,
            "alpha": settings.LAPS_ALPHA,
            "C": settings.LAPS_C,
        }

    @classmethod
    def resolve(cls, cli: Optional[Dict[str, Any]] = None, config_path: Optional[str] = None) -> "RunConfig":
        """CLI flags > config file > settings. `None` values never override."""
        merged: Dict[str, Any] = cls.defaults()
        if config_path:
            merged.update({k: v for k, v in load_config_file(config_path).items() if v is not None})
        merged.update({k: v for k, v in (cli or {}).items() if v is not None and k in cls.keys()})
        if not merged.get("target"):
            raise RunConfigError("A target name is required (--target or \"target\" in the config file).")
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def validate(self):
        if self.dim is not None and int(self.dim) < 2:
            raise RunConfigError(f"Invalid dimension {self.dim}: the sampler needs d >= 2.")
        if int(self.chains) < 2:
            raise RunConfigError(f"Need at least 2 chains, got {self.chains}.")
        if int(self.maxiter) < 1:
            raise RunConfigError(f"maxiter must be >= 1, got {self.maxiter}.")
        try:
            EquipartitionMode.parse(self.equipartition)
        except EnsembleError as e:
            raise RunConfigError(str(e))
        if not isinstance(self.preconditioning, bool):
            raise RunConfigError(f"preconditioning must be true or false, got {self.preconditioning!r}.")
        if self.steps_per_proposal is not None and int(self.steps_per_proposal) < 1:
            raise RunConfigError(f"steps_per_proposal must be >= 1, got {self.steps_per_proposal}.")
        if self.partial_refresh_factor is not None and not float(self.partial_refresh_factor) > 0:
            raise RunConfigError(f"partial_refresh_factor must be positive, got {self.partial_refresh_factor}.")

    def target_params(self) -> Dict[str, Any]:
        params: Dict[str, Any] = {"target_seed": int(self.target_seed)}
        if self.dim is not None:
            params["dim"] = int(self.dim)
        if self.condition is not None:
            params["condition"] = float(self.condition)
        return params

    def build_target(self) -> Tuple[TargetDistribution, Optional[GroundTruth], InitialDistribution]:
        return build_target(self.target, **self.target_params())

    def adaptation_config(self) -> AdaptationConfig:
        return AdaptationConfig.from_settings(
            C=self.C,
            alpha=self.alpha,
            maxiter=int(self.maxiter),
            equipartition_mode=self.equipartition,
            target_acceptance=self.acc_target,
            adjusted_integrator=self.integrator,
            unadjusted_integrator=self.unadjusted_integrator,
            switch_after=self.switch_after,
            preconditioning=self.preconditioning,
            steps_per_proposal=self.steps_per_proposal,
            partial_refresh_factor=self.partial_refresh_factor,
        )

    def output_dir(self) -> Path:
        return Path(self.out) if self.out else Path(settings.LAPS_OUTPUT_DIR) / f"{self.target}-seed{self.seed}"

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


def load_config_file(path: str) -> Dict[str, Any]:
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise RunConfigError(f"Config file not found: {p}")
    except json.JSONDecodeError as e:
        raise RunConfigError(f"Config file {p} is not valid JSON (line {e.lineno}): {e.msg}")
    if not isinstance(raw, dict):
        raise RunConfigError(f"Config file {p} must hold a JSON object.")
    # same keys as the flags, dashes allowed
    data = {str(k).replace("-", "_"): v for k, v in raw.items()}
    unknown = sorted(set(data) - set(RunConfig.keys()))
    if unknown:
        raise RunConfigError(f"Unknown key(s) in {p}: {', '.join(unknown)}.")
    return data
