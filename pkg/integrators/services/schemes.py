from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np


class SchemeError(ValueError):
    pass


@dataclass(frozen=True)
class IntegratorScheme:
    """
    Palindromic splitting Phi^B(b1 e) Phi^A(a1 e) Phi^B(b2 e) ... Phi^B(bK e).

    b_coeffs has K entries, a_coeffs K - 1. The first velocity update of a
    step reuses the gradient cached from the previous step, so a step costs
    K - 1 gradient evaluations.
    """

    name: str
    b_coeffs: Tuple[float, ...]
    a_coeffs: Tuple[float, ...]
    order: int

    def __post_init__(self):
        b = np.asarray(self.b_coeffs, dtype=float)
        a = np.asarray(self.a_coeffs, dtype=float)
        if len(b) != len(a) + 1 or len(a) < 1:
            raise SchemeError(f"{self.name}: need K velocity and K-1 position coefficients.")
        if abs(b.sum() - 1.0) > 1e-9 or abs(a.sum() - 1.0) > 1e-9:
            raise SchemeError(f"{self.name}: coefficients must each sum to 1.")
        if not (np.allclose(b, b[::-1], rtol=0, atol=1e-12) and np.allclose(a, a[::-1], rtol=0, atol=1e-12)):
            raise SchemeError(f"{self.name}: coefficients must be palindromic.")

    @property
    def gradients_per_step(self) -> int:
        return len(self.a_coeffs)


def _palindrome(half: Tuple[float, ...], middle: bool) -> Tuple[float, ...]:
    """Complete a palindromic coefficient list from its first half using normalization."""
    rest = 1.0 - 2.0 * sum(half)
    if middle:
        return tuple(half) + (rest,) + tuple(reversed(half))
    return tuple(half) + (rest / 2.0, rest / 2.0) + tuple(reversed(half))


LEAPFROG = IntegratorScheme("lf", b_coeffs=(0.5, 0.5), a_coeffs=(1.0,), order=2)

MINIMAL_NORM_2 = IntegratorScheme(
    "mn2",
    b_coeffs=_palindrome((0.1931833275,), middle=True),
    a_coeffs=(0.5, 0.5),
    order=2,
)

MINIMAL_NORM_4 = IntegratorScheme(
    "mn4",
    b_coeffs=_palindrome((0.0839831526, 0.6822365335), middle=False),
    a_coeffs=_palindrome((0.2539785108, -0.032302867), middle=True),
    order=4,
)

SCHEMES: Dict[str, IntegratorScheme] = {s.name: s for s in (LEAPFROG, MINIMAL_NORM_2, MINIMAL_NORM_4)}


def get_scheme(name) -> IntegratorScheme:
    if isinstance(name, IntegratorScheme):
        return name
    key = (name or "").strip().lower()
    if key not in SCHEMES:
        raise SchemeError(f"Unknown integrator '{name}'. Choose one of: {', '.join(SCHEMES)}.")
    return SCHEMES[key]


def adjusted_scheme_for(d: int) -> IntegratorScheme:
    # fourth order pays off for the adjusted phase in high dimension
    return MINIMAL_NORM_4 if d > 200 else MINIMAL_NORM_2
