"""
Equipartition loss: a bias proxy that needs no ground truth.

With V_ij = E_rho[-(x_i - E[x_i]) d_j log p], V equals the identity when
rho = p. The loss is D = |I - V|_F^2 / d (full rank) or sum_i (1 - V_ii)^2 / d
(diagonal). Both reuse the gradients the dynamics already computed.
"""
import itertools
from typing import Optional

import numpy as np

from .ensemble import finite_chain_values


def _centered(x: np.ndarray, grad: np.ndarray):
    both = finite_chain_values(np.concatenate([x, grad], axis=1), "equipartition")
    d = x.shape[1]
    xs, gs = both[:, :d], both[:, d:]
    return xs - xs.mean(axis=0), gs


def equipartition_diag(x: np.ndarray, grad: np.ndarray) -> float:
    xc, g = _centered(x, grad)
    v_diag = -np.mean(xc * g, axis=0)
    return float(np.mean((1.0 - v_diag) ** 2))


def rademacher_probes(rng: np.random.Generator, d: int, probes: int) -> np.ndarray:
    return rng.choice(np.array([-1.0, 1.0]), size=(d, int(probes)))


def all_sign_probes(d: int) -> np.ndarray:
    """Every vector of {-1, 1}^d; averaging over them makes the trace estimate exact."""
    return np.array(list(itertools.product((-1.0, 1.0), repeat=d))).T


def equipartition_full(
    x: np.ndarray,
    grad: np.ndarray,
    probes: int = 100,
    rng: Optional[np.random.Generator] = None,
    probe_vectors: Optional[np.ndarray] = None,
) -> float:
    """
    Hutchinson estimate of |I - V|_F^2 / d with Rademacher probes z:
    mean_z | z + (1/M) sum_m (x^m - xbar) (grad^m . z) |^2 / d.
    Never forms the d x d matrix; cost O(d M probes).
    """
    xc, g = _centered(x, grad)
    m, d = xc.shape
    if probe_vectors is None:
        if rng is None:
            raise ValueError("equipartition_full needs an rng or explicit probe_vectors.")
        if int(probes) < 1:
            raise ValueError(f"probes must be >= 1, got {probes}.")
        probe_vectors = rademacher_probes(rng, d, probes)
    z = np.asarray(probe_vectors, dtype=float)
    residual = z + xc.T @ (g @ z) / m
    return float(np.mean(np.sum(residual ** 2, axis=0)) / d)


def equipartition_matrix(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Dense V, for checks on small problems."""
    xc, g = _centered(x, grad)
    return -(xc.T @ g) / xc.shape[0]


def gaussian_equipartition(target_cov: np.ndarray, ensemble_cov: np.ndarray) -> float:
    """Closed form for zero-mean Gaussians: |I - S' S^-1|_F^2 / d."""
    d = target_cov.shape[0]
    v = np.linalg.solve(target_cov.T, ensemble_cov.T).T
    return float(np.sum((np.eye(d) - v) ** 2) / d)


def gaussian_equipartition_diag(target_cov: np.ndarray, ensemble_cov: np.ndarray) -> float:
    """Closed form of the diagonal loss for zero-mean Gaussians: mean_i (1 - (S' S^-1)_ii)^2."""
    v = np.linalg.solve(target_cov.T, ensemble_cov.T).T
    return float(np.mean((1.0 - np.diag(v)) ** 2))
