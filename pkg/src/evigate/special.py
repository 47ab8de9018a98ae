"""Log-gamma, digamma and trigamma for positive real arguments.

Implemented without external dependencies: log-gamma uses a Lanczos
approximation (g = 7, 9 terms) with reflection below 0.5; digamma and
trigamma use the ascending recurrence to shift the argument above 10
followed by the asymptotic (de Moivre) expansion.  All three are accurate
to better than 1e-12 relative error on (0, inf), vectorised over numpy
arrays.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError

_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_TWO_PI = 0.9189385332046727  # 0.5 * ln(2*pi)

# Shift threshold for the psi recurrences; above this the asymptotic tails
# below are accurate to ~1e-14 relative.
_PSI_SHIFT = 10.0


def _check_positive(x: np.ndarray, name: str) -> None:
    if x.size and not np.all(x > 0.0):
        raise DomainError(f"{name} requires strictly positive input")


def _lgamma_core(z: np.ndarray) -> np.ndarray:
    # Lanczos sum for z >= 0.5.
    acc = np.full_like(z, _LANCZOS_COEF[0])
    for i, c in enumerate(_LANCZOS_COEF[1:], start=1):
        acc = acc + c / (z - 1.0 + i)
    t = z + _LANCZOS_G - 0.5
    return _HALF_LOG_TWO_PI + (z - 0.5) * np.log(t) - t + np.log(acc)


def lgamma(x) -> np.ndarray:
    """Natural log of the gamma function, elementwise, for x > 0."""
    x = np.asarray(x, dtype=np.float64)
    _check_positive(x, "lgamma")
    small = x < 0.5
    if not np.any(small):
        return _lgamma_core(x)
    # Reflection: ln G(x) = ln pi - ln sin(pi x) - ln G(1 - x); sin(pi x) > 0
    # on (0, 0.5) so no absolute value is needed.
    z = np.where(small, 1.0 - x, x)
    core = _lgamma_core(z)
    refl = np.log(np.pi) - np.log(np.sin(np.pi * np.where(small, x, 0.5))) - core
    return np.where(small, refl, core)


_SHIFT_OFFSETS = np.arange(int(_PSI_SHIFT), dtype=np.float64)


def digamma(x) -> np.ndarray:
    """Digamma (psi) function, elementwise, for x > 0."""
    x = np.asarray(x, dtype=np.float64)
    _check_positive(x, "digamma")
    # psi(x) = psi(x + 10) - sum_{j<10} 1/(x + j), valid for every x > 0,
    # lands the asymptotic expansion at y >= 10 without branching.
    shifted = (1.0 / (x[..., None] + _SHIFT_OFFSETS)).sum(axis=-1)
    y = x + _PSI_SHIFT
    w = 1.0 / (y * y)
    tail = w * (
        1.0 / 12.0
        - w * (1.0 / 120.0
               - w * (1.0 / 252.0
                      - w * (1.0 / 240.0
                             - w * (1.0 / 132.0
                                    - w * (691.0 / 32760.0
                                           - w * (1.0 / 12.0))))))
    )
    return np.log(y) - 0.5 / y - tail - shifted


def trigamma(x) -> np.ndarray:
    """Trigamma (psi') function, elementwise, for x > 0."""
    x = np.asarray(x, dtype=np.float64)
    _check_positive(x, "trigamma")
    base = x[..., None] + _SHIFT_OFFSETS
    shifted = (1.0 / (base * base)).sum(axis=-1)
    y = x + _PSI_SHIFT
    w = 1.0 / (y * y)
    tail = (
        1.0
        + w * (1.0 / 6.0
               - w * (1.0 / 30.0
                      - w * (1.0 / 42.0
                             - w * (1.0 / 30.0
                                    - w * (5.0 / 66.0
                                           - w * (691.0 / 2730.0
                                                  - w * (7.0 / 6.0)))))))
    ) / y
    return 0.5 * w + tail + shifted
