from typing import Tuple

import numpy as np

from .distributions import (
    GroundTruth,
    GroundTruthSource,
    InitialDistribution,
    TargetDistribution,
    TargetError,
    standard_normal_start,
)

BANANA_WIDTH = 10.0
BANANA_CURVATURE = 0.03

# Gamma draws for the ill-conditioned spectrum before log-space rescaling
ICG_GAMMA_SHAPE = 0.5
ICG_GAMMA_SCALE = 1.0

Built = Tuple[TargetDistribution, GroundTruth, InitialDistribution]


def banana_target() -> Built:
    """
    2-d banana: x1 ~ N(0, 10^2), x2 | x1 ~ N(0.03 (x1^2 - 100), 1).
    """
    w2 = BANANA_WIDTH ** 2
    b = BANANA_CURVATURE

    def log_density(x):
        x1, x2 = x[:, 0], x[:, 1]
        r = x2 - b * (x1 ** 2 - w2)
        return -0.5 * x1 ** 2 / w2 - 0.5 * r ** 2

    def gradient(x):
        x1, x2 = x[:, 0], x[:, 1]
        r = x2 - b * (x1 ** 2 - w2)
        return np.stack([-x1 / w2 + 2.0 * b * r * x1, -r], axis=-1)

    def exact_sampler(rng, n):
        x1 = BANANA_WIDTH * rng.standard_normal(n)
        x2 = b * (x1 ** 2 - w2) + rng.standard_normal(n)
        return np.stack([x1, x2], axis=-1)

    # With x1 = 10 z and w = 0.03 (x1^2 - 100) = 3 (z^2 - 1):
    #   E[w^2] = 18, E[w^4] = 81 * E[(z^2 - 1)^4] = 4860
    #   E[x2^2] = 1 + 18, E[x2^4] = 4860 + 6 * 18 + 3
    e_w2 = (b * w2) ** 2 * 2.0
    e_w4 = (b * w2) ** 4 * 60.0
    second = np.array([w2, 1.0 + e_w2])
    fourth = np.array([3.0 * w2 ** 2, e_w4 + 6.0 * e_w2 + 3.0])

    target = TargetDistribution(
        name="banana",
        dimension=2,
        log_density_fn=log_density,
        gradient_fn=gradient,
        exact_sampler=exact_sampler,
        params={"width": BANANA_WIDTH, "curvature": b},
    )
    truth = GroundTruth(second, fourth - second ** 2, GroundTruthSource.ANALYTIC)
    return target, truth, standard_normal_start(2)


def _gaussian(name: str, eigenvalues: np.ndarray, rotation: np.ndarray, params: dict) -> Built:
    d = eigenvalues.shape[0]
    cov = (rotation * eigenvalues) @ rotation.T
    cov = 0.5 * (cov + cov.T)
    precision = (rotation / eigenvalues) @ rotation.T
    precision = 0.5 * (precision + precision.T)
    sqrt_cov = rotation * np.sqrt(eigenvalues)

    def log_density(x):
        return -0.5 * np.sum(x * (x @ precision), axis=-1)

    def gradient(x):
        return -x @ precision

    def exact_sampler(rng, n):
        return rng.standard_normal((n, d)) @ sqrt_cov.T

    target = TargetDistribution(
        name=name,
        dimension=d,
        log_density_fn=log_density,
        gradient_fn=gradient,
        exact_sampler=exact_sampler,
        params=params,
        extras={"covariance": cov, "eigenvalues": eigenvalues, "rotation": rotation},
    )
    diag = np.diag(cov).copy()
    truth = GroundTruth(diag, 2.0 * diag ** 2, GroundTruthSource.ANALYTIC)
    return target, truth, standard_normal_start(d)


def random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix from the QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def conditioned_spectrum(raw: np.ndarray, condition: float) -> np.ndarray:
    """
    Affine map of log(raw) that keeps the smallest value and makes
    max/min equal to `condition` exactly.
    """
    logs = np.log(raw)
    lo, hi = logs.min(), logs.max()
    if hi - lo == 0.0 or condition == 1.0:
        return np.full_like(raw, np.exp(lo))
    scaled = lo + (logs - lo) * (np.log(condition) / (hi - lo))
    out = np.exp(scaled)
    # pin the endpoints so the ratio holds to rounding
    out[np.argmin(logs)] = np.exp(lo)
    out[np.argmax(logs)] = np.exp(lo) * condition
    return out


def ill_conditioned_gaussian(d: int, seed: int = 0, target_condition: float = 1e5) -> Built:
    d = int(d)
    if d < 2:
        raise TargetError(f"ill_conditioned_gaussian needs d >= 2, got {d}.")
    if not target_condition >= 1.0:
        raise TargetError(f"target_condition must be >= 1, got {target_condition}.")

    rng = np.random.default_rng(seed)
    rotation = random_rotation(d, rng)
    raw = rng.gamma(ICG_GAMMA_SHAPE, ICG_GAMMA_SCALE, size=d)
    eigenvalues = conditioned_spectrum(raw, float(target_condition))
    return _gaussian(
        "icg",
        eigenvalues,
        rotation,
        {"dim": d, "seed": int(seed), "condition": float(target_condition)},
    )


def standard_gaussian(d: int) -> Built:
    d = int(d)
    if d < 1:
        raise TargetError(f"standard_gaussian needs d >= 1, got {d}.")

    def log_density(x):
        return -0.5 * np.sum(x * x, axis=-1)

    def gradient(x):
        return -x

    def exact_sampler(rng, n):
        return rng.standard_normal((n, d))

    target = TargetDistribution(
        name="gaussian",
        dimension=d,
        log_density_fn=log_density,
        gradient_fn=gradient,
        exact_sampler=exact_sampler,
        params={"dim": d},
    )
    truth = GroundTruth(np.ones(d), np.full(d, 2.0), GroundTruthSource.ANALYTIC)
    return target, truth, standard_normal_start(d)
