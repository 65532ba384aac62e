"""
Microcanonical Langevin dynamics on a block of chains.

Arrays are laid out with one chain per row: positions x and unit velocities
u are (n, d). The log density and its gradient at x are cached on the state
so that velocity updates never re-evaluate the target.

Energy bookkeeping: a position update changes the energy by
-log p(x') + log p(x), a velocity update by (d - 1) log(cosh d + (e.u) sinh d).
The stochastic update changes nothing.

A chain whose density or gradient turns non-finite is marked divergent; it
keeps its last finite sub-state and ignores the remaining sub-updates of the
step.
"""
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .schemes import IntegratorScheme, SchemeError


@dataclass
class ChainState:
    x: np.ndarray
    u: np.ndarray
    log_density: np.ndarray
    gradient: np.ndarray

    @property
    def size(self) -> int:
        return int(self.x.shape[0])

    @property
    def dimension(self) -> int:
        return int(self.x.shape[1])

    def take(self, rows) -> "ChainState":
        return ChainState(self.x[rows], self.u[rows], self.log_density[rows], self.gradient[rows])

    def copy(self) -> "ChainState":
        return ChainState(self.x.copy(), self.u.copy(), self.log_density.copy(), self.gradient.copy())

    def flipped(self) -> "ChainState":
        return replace(self, u=-self.u)

    @classmethod
    def concatenate(cls, parts: Sequence["ChainState"]) -> "ChainState":
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.u for p in parts]),
            np.concatenate([p.log_density for p in parts]),
            np.concatenate([p.gradient for p in parts]),
        )


@dataclass
class StepResult:
    new_state: ChainState
    energy_change: np.ndarray
    gradient_calls: int
    divergent: np.ndarray

    @classmethod
    def concatenate(cls, parts: Sequence["StepResult"]) -> "StepResult":
        return cls(
            ChainState.concatenate([p.new_state for p in parts]),
            np.concatenate([p.energy_change for p in parts]),
            parts[0].gradient_calls,
            np.concatenate([p.divergent for p in parts]),
        )


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _rows(mask: Optional[np.ndarray], n: int) -> np.ndarray:
    return np.ones(n, dtype=bool) if mask is None else mask


def init_state(x: np.ndarray, u: np.ndarray, target) -> Tuple[ChainState, np.ndarray]:
    """Evaluate the target at x; returns the state and the divergence mask."""
    x = np.asarray(x, dtype=float)
    logp, grad = target.evaluate(x)
    divergent = ~(np.isfinite(logp) & np.all(np.isfinite(grad), axis=-1))
    return ChainState(x.copy(), np.asarray(u, dtype=float).copy(), logp, grad), divergent


def position_update(state: ChainState, eps: float, target, active: Optional[np.ndarray] = None):
    """
    Phi^A: x' = x + eps u. Returns (state', energy change, divergent rows).
    Rows outside `active` are left untouched and contribute zero.
    """
    n = state.size
    act = _rows(active, n)
    x_new = state.x + eps * state.u
    logp_new, grad_new = target.evaluate(x_new)
    finite = np.isfinite(logp_new) & np.all(np.isfinite(grad_new), axis=-1)
    diverged = act & ~finite
    ok = act & finite

    okc = ok[:, None]
    x = np.where(okc, x_new, state.x)
    logp = np.where(ok, logp_new, state.log_density)
    grad = np.where(okc, grad_new, state.gradient)
    delta = np.where(ok, state.log_density - logp_new, 0.0)
    return ChainState(x, state.u, logp, grad), delta, diverged


def velocity_update(state: ChainState, eps: float, active: Optional[np.ndarray] = None):
    """
    Phi^B, exact solution of du/dt = (I - u u^T) g / (d - 1) at fixed x.

    Written with zeta = exp(-delta) so that no cosh/sinh overflows for large
    gradients. A zero gradient leaves u unchanged with zero energy change.
    """
    d = state.dimension
    if d < 2:
        raise SchemeError("The microcanonical velocity update needs d >= 2.")
    act = _rows(active, state.size)

    g = state.gradient
    g_norm = np.linalg.norm(g, axis=-1)
    safe = np.where(g_norm > 0.0, g_norm, 1.0)
    e = np.where((g_norm > 0.0)[:, None], g / safe[:, None], 0.0)
    ue = np.sum(e * state.u, axis=-1)
    delta = eps * g_norm / (d - 1)
    zeta = np.exp(-delta)

    uu = e * ((1.0 - zeta) * (1.0 + zeta + ue * (1.0 - zeta)))[:, None] + 2.0 * zeta[:, None] * state.u
    log_ratio = delta - np.log(2.0) + np.log(1.0 + ue + (1.0 - ue) * zeta ** 2)

    u = np.where(act[:, None], _normalize(uu), state.u)
    energy = np.where(act, (d - 1) * log_ratio, 0.0)
    return replace(state, u=u), energy


def stochastic_update(state: ChainState, eps: float, L: float, streams: Sequence[np.random.Generator]) -> ChainState:
    """
    Phi^O partial refresh: u' = (c1 u + c2 Z) / |c1 u + c2 Z|, c1 = exp(-eps / L),
    Z ~ N(0, I / d) so that |Z| ~ |u| = 1. The normalization does not remove
    the scale of Z: it sets how fast the direction decoheres relative to L.

    Every chain draws one standard normal vector from its own stream, also
    when c2 == 0, so stream consumption does not depend on eps.
    """
    if not L > 0:
        raise SchemeError(f"Decoherence scale must be positive, got {L}.")
    c1 = np.exp(-eps / L)
    c2 = np.sqrt(-np.expm1(-2.0 * eps / L))
    d = state.dimension

    z = np.stack([rng.standard_normal(d) for rng in streams]) / np.sqrt(d)
    mixed = c1 * state.u + c2 * z
    norms = np.linalg.norm(mixed, axis=-1)
    for i in np.flatnonzero(norms == 0.0):
        # measure-zero event; redraw for this chain only
        while norms[i] == 0.0:
            mixed[i] = c1 * state.u[i] + c2 * streams[i].standard_normal(d) / np.sqrt(d)
            norms[i] = np.linalg.norm(mixed[i])
    return replace(state, u=mixed / norms[:, None])


def full_refresh(state: ChainState, streams: Sequence[np.random.Generator]) -> ChainState:
    """u <- Z / |Z|, uniform on the sphere."""
    d = state.dimension
    z = np.stack([rng.standard_normal(d) for rng in streams])
    return replace(state, u=_normalize(z))


def deterministic_step(
    state: ChainState,
    eps: float,
    scheme: IntegratorScheme,
    target,
    divergent: Optional[np.ndarray] = None,
):
    """
    The palindromic B/A composition Phi_eps. Returns
    (state', summed energy change, gradient calls, divergent rows).
    """
    n = state.size
    diverged = np.zeros(n, dtype=bool) if divergent is None else divergent.copy()
    total = np.zeros(n)
    b, a = scheme.b_coeffs, scheme.a_coeffs

    state, dE = velocity_update(state, b[0] * eps, ~diverged)
    total += dE
    for k in range(len(a)):
        state, dE, newly = position_update(state, a[k] * eps, target, ~diverged)
        total += dE
        diverged |= newly
        state, dE = velocity_update(state, b[k + 1] * eps, ~diverged)
        total += dE
    return state, total, scheme.gradients_per_step, diverged


def mclmc_step(
    state: ChainState,
    eps: float,
    L: float,
    scheme: IntegratorScheme,
    target,
    streams: Sequence[np.random.Generator],
) -> StepResult:
    """Phi^O(eps/2) o Phi_eps o Phi^O(eps/2)."""
    if not eps > 0:
        raise SchemeError(f"Step size must be positive, got {eps}.")
    state = stochastic_update(state, 0.5 * eps, L, streams)
    state, total, calls, diverged = deterministic_step(state, eps, scheme, target)
    state = stochastic_update(state, 0.5 * eps, L, streams)
    energy = np.where(diverged, np.inf, total)
    return StepResult(state, energy, calls, diverged)


def aligned_velocity(gradient: np.ndarray, streams: List[np.random.Generator]) -> np.ndarray:
    """Unit velocities along the gradient; chains with a zero gradient get a random direction."""
    norms = np.linalg.norm(gradient, axis=-1)
    u = np.empty_like(gradient)
    for i, rng in enumerate(streams):
        if norms[i] > 0.0 and np.isfinite(norms[i]):
            u[i] = gradient[i] / norms[i]
        else:
            z = rng.standard_normal(gradient.shape[1])
            u[i] = z / np.linalg.norm(z)
    return u
