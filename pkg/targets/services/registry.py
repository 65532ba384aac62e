"""
Name -> target factory lookup used by the CLI.

A factory is any callable `factory(**params) -> (TargetDistribution,
GroundTruth or None, InitialDistribution)`. It receives every target
parameter of the run configuration (`dim`, `condition`, `target_seed`, ...)
and should ignore the ones it does not use, so it must accept `**kwargs`.

    from targets.services.registry import register_target

    def my_target(dim=10, **_):
        ...
        return target, None, init

    register_target("mine", my_target)

Registration is in-process only; call it before running the sampler (for
example from an app's `ready()` hook or at the top of a script).
"""
import logging
import threading
from typing import Callable, Dict, List, Optional, Tuple

from .builtins import banana_target, ill_conditioned_gaussian, standard_gaussian
from .distributions import GroundTruth, InitialDistribution, TargetDistribution, TargetError

logger = logging.getLogger(__name__)

TargetFactory = Callable[..., Tuple[TargetDistribution, Optional[GroundTruth], InitialDistribution]]


def _banana(**_):
    return banana_target()


def _icg(dim: int = 100, condition: float = 1e5, target_seed: int = 0, **_):
    return ill_conditioned_gaussian(int(dim), seed=int(target_seed), target_condition=float(condition))


def _gaussian(dim: int = 2, **_):
    return standard_gaussian(int(dim))


_BUILTINS: Dict[str, TargetFactory] = {
    "banana": _banana,
    "icg": _icg,
    "gaussian": _gaussian,
}
_ALIASES = {"standard_gaussian": "gaussian", "ill_conditioned_gaussian": "icg"}

_lock = threading.Lock()
_registry: Dict[str, TargetFactory] = dict(_BUILTINS)


def register_target(name: str, factory: TargetFactory, *, replace: bool = False) -> None:
    key = (name or "").strip().lower()
    if not key:
        raise TargetError("Target name must be a non-empty string.")
    if not callable(factory):
        raise TargetError(f"Factory for target '{key}' is not callable.")
    with _lock:
        if key in _registry and not replace:
            raise TargetError(f"Target '{key}' is already registered (pass replace=True to override).")
        _registry[key] = factory
    logger.debug("registered target %s", key)


def unregister_target(name: str) -> None:
    key = (name or "").strip().lower()
    if key in _BUILTINS:
        raise TargetError(f"Built-in target '{key}' cannot be removed.")
    with _lock:
        _registry.pop(key, None)


def available_targets() -> List[str]:
    with _lock:
        return sorted(_registry)


def build_target(name: str, **params) -> Tuple[TargetDistribution, Optional[GroundTruth], InitialDistribution]:
    key = (name or "").strip().lower()
    key = _ALIASES.get(key, key)
    with _lock:
        factory = _registry.get(key)
    if factory is None:
        raise TargetError(f"Unknown target '{name}'. Available: {', '.join(available_targets())}.")

    target, truth, init = factory(**params)
    if truth is not None and truth.dimension != target.dimension:
        raise TargetError(f"Ground truth for '{key}' has dimension {truth.dimension}, target has {target.dimension}.")
    if init.dimension != target.dimension:
        raise TargetError(f"Initial distribution for '{key}' has dimension {init.dimension}, target has {target.dimension}.")
    if truth is None:
        logger.warning("target %s has no ground truth; bias diagnostics will be skipped", key)
    return target, truth, init
