#!/usr/bin/env python3
"""
Special functions for psifrac.
Gamma (Lanczos), digamma (shifted asymptotic series) and the one-parameter
Mittag-Leffler function E_alpha(z) for real arguments.
"""

import cmath
import logging
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from core.errors import ConvergenceError, DomainError, PoleError

logger = logging.getLogger(__name__)

# Lanczos approximation, g=7, n=9
LANCZOS_G = 7.0
LANCZOS_COEFFS = (
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
_HALF_LOG_TWO_PI = 0.5 * math.log(2.0 * math.pi)

# Asymptotic digamma coefficients B_2k / (2k), k = 1..6
_DIGAMMA_SHIFT = 6.0
_DIGAMMA_SERIES = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
)

# Mittag-Leffler evaluation
ML_SERIES_RADIUS = 30.0
ML_MAX_TERMS = 200
ML_ASYMPTOTIC_TERMS = 60


def _is_nonpositive_integer(x: float) -> bool:
    return x <= 0.0 and float(x).is_integer()


def _lanczos_sum(z: float) -> float:
    acc = LANCZOS_COEFFS[0]
    for i in range(1, len(LANCZOS_COEFFS)):
        acc += LANCZOS_COEFFS[i] / (z + i)
    return acc


def gamma(x: float) -> float:
    """
    Gamma function of a real argument.

    Args:
        x: Real argument, not a non-positive integer.

    Returns:
        float: Gamma(x). Overflows to inf beyond x ~ 171.6.

    Raises:
        PoleError: x is 0, -1, -2, ...
    """
    x = float(x)
    if math.isnan(x):
        raise DomainError("gamma: argument is NaN")
    if _is_nonpositive_integer(x):
        raise PoleError(f"gamma: pole at x={x:g}")
    if x < 0.5:
        # Reflection formula
        return math.pi / (math.sin(math.pi * x) * gamma(1.0 - x))
    z = x - 1.0
    t = z + LANCZOS_G + 0.5
    try:
        return math.sqrt(2.0 * math.pi) * t ** (z + 0.5) * math.exp(-t) * _lanczos_sum(z)
    except OverflowError:
        return math.inf


def log_gamma(x: float) -> float:
    """Natural log of |Gamma(x)| for real x that is not a pole."""
    x = float(x)
    if _is_nonpositive_integer(x):
        raise PoleError(f"log_gamma: pole at x={x:g}")
    if x < 0.5:
        return math.log(math.pi / abs(math.sin(math.pi * x))) - log_gamma(1.0 - x)
    z = x - 1.0
    t = z + LANCZOS_G + 0.5
    return _HALF_LOG_TWO_PI + (z + 0.5) * math.log(t) - t + math.log(_lanczos_sum(z))


def rgamma(x: float) -> float:
    """Reciprocal Gamma, entire: 0 at the poles of Gamma."""
    x = float(x)
    if _is_nonpositive_integer(x):
        return 0.0
    if x < 0.5:
        return math.sin(math.pi * x) * gamma(1.0 - x) / math.pi
    g = gamma(x)
    return 0.0 if math.isinf(g) else 1.0 / g


def digamma(x: float) -> float:
    """
    Digamma function Psi(x) = Gamma'(x)/Gamma(x) for x > 0.

    Shifts x up to at least 6 with Psi(x) = Psi(x+1) - 1/x, then applies the
    asymptotic expansion through the B_12 term.

    Raises:
        DomainError: x <= 0
    """
    x = float(x)
    if not x > 0.0:
        raise DomainError(f"digamma: requires x > 0, got {x:g}")
    acc = 0.0
    while x < _DIGAMMA_SHIFT:
        acc -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    series = 0.0
    power = inv2
    for coeff in _DIGAMMA_SERIES:
        series += coeff * power
        power *= inv2
    return acc + math.log(x) - 0.5 / x - series


@dataclass(frozen=True)
class MLParams:
    """Order and argument of E_alpha(z)."""
    alpha: float
    z: float

    def __post_init__(self):
        if not (self.alpha > 0.0):
            raise DomainError(f"Mittag-Leffler order must be > 0, got {self.alpha}")
        if self.alpha > 2.0:
            raise DomainError(f"Mittag-Leffler order must be <= 2, got {self.alpha}")
        if not math.isfinite(self.z):
            raise DomainError("Mittag-Leffler argument must be finite")


def _ml_series(alpha: float, z: float) -> float:
    # Kahan-compensated power series with term-ratio stopping
    log_abs_z = math.log(abs(z))
    negative = z < 0.0
    total = 1.0
    comp = 0.0
    prev_mag = 1.0
    peak = 1.0
    for k in range(1, ML_MAX_TERMS + 1):
        mag = math.exp(k * log_abs_z - log_gamma(alpha * k + 1.0))
        term = -mag if (negative and k % 2) else mag
        y = term - comp
        s = total + y
        comp = (s - total) - y
        total = s
        peak = max(peak, mag)
        if mag < prev_mag and mag <= 1e-17 * max(abs(total), 1e-300):
            if peak > 1e6 * abs(total):
                logger.warning("Mittag-Leffler series lost about %.0f digits to cancellation "
                               "(alpha=%g, z=%g)", math.log10(peak / abs(total)), alpha, z)
            return total
        prev_mag = mag
    raise ConvergenceError(
        f"Mittag-Leffler series did not converge within {ML_MAX_TERMS} terms "
        f"(alpha={alpha:g}, z={z:g})")


def _ml_algebraic_tail(alpha: float, z: float) -> float:
    total = 0.0
    prev = math.inf
    for k in range(1, ML_ASYMPTOTIC_TERMS + 1):
        term = z ** (-k) * rgamma(1.0 - alpha * k)
        mag = abs(term)
        if mag > prev and mag > 0.0:
            break
        total += term
        if mag != 0.0 and mag < 1e-17 * max(abs(total), 1e-300):
            break
        if mag != 0.0:
            prev = mag
    return total


def _ml_asymptotic(alpha: float, z: float) -> float:
    tail = _ml_algebraic_tail(alpha, z)
    if z > 0.0:
        try:
            return math.exp(z ** (1.0 / alpha)) / alpha - tail
        except OverflowError:
            return math.inf
    # z < 0: exponential contributions only when alpha > 1
    head = 0.0
    if alpha > 1.0:
        w = (-z) ** (1.0 / alpha) * cmath.exp(1j * math.pi / alpha)
        head = 2.0 / alpha * cmath.exp(w).real
    return head - tail


def mittag_leffler(p: MLParams) -> float:
    """
    One-parameter Mittag-Leffler function E_alpha(z) = sum z^k / Gamma(alpha k + 1).

    Power series for |z| <= 30, exponential asymptotics beyond. Exact
    shortcuts for alpha = 1 (exp) and alpha = 2 (cosh / cos).

    Args:
        p: Order and argument.

    Returns:
        float: E_alpha(z)

    Raises:
        ConvergenceError: series term cap hit before the tolerance
    """
    alpha, z = float(p.alpha), float(p.z)
    if z == 0.0:
        return 1.0
    if alpha == 1.0:
        return math.exp(z)
    if alpha == 2.0:
        return math.cosh(math.sqrt(z)) if z > 0.0 else math.cos(math.sqrt(-z))
    if abs(z) <= ML_SERIES_RADIUS:
        return _ml_series(alpha, z)
    return _ml_asymptotic(alpha, z)


def mittag_leffler_array(alpha: float, z: Union[float, np.ndarray]) -> np.ndarray:
    """Elementwise E_alpha over an array of arguments."""
    values = np.asarray(z, dtype=float)
    flat = [mittag_leffler(MLParams(alpha, float(v))) for v in values.ravel()]
    return np.asarray(flat, dtype=float).reshape(values.shape)
