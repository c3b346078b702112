"""Domain types and closed-form results for the biased DOPO.

Units are dimensionless throughout: time in cavity lifetimes, pump
strength relative to threshold, and field amplitudes in the quadrature
units of the stochastic equations.  The Husimi convention is
``Q(alpha) = exp(-|alpha|^2) / pi`` (vacuum variance 1/2 per quadrature).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

__all__ = [
    "PhasePoint",
    "PumpParams",
    "BiasSpec",
    "GaussianStateSpec",
    "FVariance",
    "ValidationError",
    "erf",
    "vacuum_q",
    "gaussian_q",
    "displacement",
    "f_variance",
    "erf_probability",
    "probability_curve",
    "bias_width",
    "bias_to_axis",
    "theoretical_marginal",
]

erf = special.erf


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition.

    ``path`` names the offending field (dotted for nested configs).
    """

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def _require_above_threshold(lam):
    if not lam > 1.0:
        raise ValidationError(
            f"pump strength must be above threshold (lambda > 1), got {lam}", "lambda"
        )


@dataclass(frozen=True)
class PhasePoint:
    re: float
    im: float

    def __post_init__(self):
        if not (math.isfinite(self.re) and math.isfinite(self.im)):
            raise ValidationError("phase-space point must be finite", "alpha")

    def as_complex(self) -> complex:
        return complex(self.re, self.im)


@dataclass(frozen=True)
class PumpParams:
    lam: float
    theta: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError(f"must be >= 0, got {self.lam}", "pump.lambda")
        if not 0.0 <= self.theta < math.pi:
            raise ValidationError(f"must lie in [0, pi), got {self.theta}", "pump.theta")


@dataclass(frozen=True)
class BiasSpec:
    """Coherent bias field switched on at ``tau0``.

    ``extinction_floor`` is the residual amplitude leaking through the
    modulator before injection (same phase as the bias).
    """

    amplitude: float = 0.0
    tau0: float = 0.0
    phase: float = 0.0
    extinction_floor: float = 0.0

    def __post_init__(self):
        if self.tau0 < 0:
            raise ValidationError(f"must be >= 0, got {self.tau0}", "bias.tau0")
        if self.extinction_floor < 0:
            raise ValidationError("must be >= 0", "bias.extinction_floor")
        if self.amplitude != 0 and self.extinction_floor > abs(self.amplitude):
            raise ValidationError(
                "must not exceed |amplitude|", "bias.extinction_floor"
            )

    def value(self, tau: float) -> float:
        """Signed bias amplitude acting at time ``tau``."""
        if tau >= self.tau0:
            return self.amplitude
        if self.extinction_floor == 0:
            return 0.0
        return math.copysign(self.extinction_floor, self.amplitude)


@dataclass(frozen=True)
class GaussianStateSpec:
    mean: PhasePoint = field(default_factory=lambda: PhasePoint(0.0, 0.0))
    var_major: float = 0.5
    var_minor: float = 0.5
    axis_angle: float = 0.0

    def __post_init__(self):
        if not self.var_minor > 0:
            raise ValidationError(
                f"variances must be positive, got {self.var_minor}", "state.var_minor"
            )
        if self.var_major < self.var_minor:
            raise ValidationError("var_major must be >= var_minor", "state.var_major")

    def covariance(self) -> np.ndarray:
        c, s = math.cos(self.axis_angle), math.sin(self.axis_angle)
        rot = np.array([[c, -s], [s, c]])
        return rot @ np.diag([self.var_major, self.var_minor]) @ rot.T

    def marginal_variance(self, theta: float) -> float:
        """Variance of the projection onto the axis at angle ``theta``."""
        d = theta - self.axis_angle
        return self.var_major * math.cos(d) ** 2 + self.var_minor * math.sin(d) ** 2


@dataclass(frozen=True)
class FVariance:
    value: float

    def __post_init__(self):
        if self.value < 0:
            raise ValidationError("variance must be >= 0", "f_variance")

    def __float__(self):
        return self.value


def vacuum_q(alpha):
    """Husimi Q of the vacuum, ``exp(-|alpha|^2) / pi``.

    ``alpha`` may be a PhasePoint, a complex number or an array of them.
    """
    if isinstance(alpha, PhasePoint):
        alpha = alpha.as_complex()
    return np.exp(-np.abs(alpha) ** 2) / np.pi


def gaussian_q(alpha, spec: GaussianStateSpec):
    """Normalized 2D Gaussian density described by ``spec`` at ``alpha``."""
    if isinstance(alpha, PhasePoint):
        alpha = alpha.as_complex()
    alpha = np.asarray(alpha, dtype=complex)
    cov = spec.covariance()
    inv = np.linalg.inv(cov)
    dx = alpha.real - spec.mean.re
    dy = alpha.imag - spec.mean.im
    quad = inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
    norm = 2 * np.pi * math.sqrt(spec.var_major * spec.var_minor)
    return np.exp(-0.5 * quad) / norm


def displacement(b, lam):
    """Phase-space shift equivalent to a bias ``b`` above threshold."""
    _require_above_threshold(lam)
    if np.ndim(b):
        b = np.asarray(b, dtype=float)
    return math.sqrt(2.0) * b / (lam - 1.0)


def f_variance(tau, lam) -> FVariance:
    """Variance of the weighted Wiener integral ``int_0^tau exp(-(lam-1)s) dW``."""
    _require_above_threshold(lam)
    if tau < 0:
        raise ValidationError(f"must be >= 0, got {tau}", "tau")
    k = lam - 1.0
    if math.isinf(tau):
        return FVariance(1.0 / (2 * k))
    return FVariance(-math.expm1(-2 * k * tau) / (2 * k))


def probability_curve(b0, lam, tau0=0.0):
    """Vectorized closed-form probability of the phase-0 steady state."""
    _require_above_threshold(lam)
    k = lam - 1.0
    arg = math.sqrt(2.0) * np.asarray(b0, dtype=float) * math.exp(-k * tau0)
    upper = 0.5 * (1.0 + erf(np.abs(arg) / (math.sqrt(lam) * math.sqrt(k))))
    # built from |b| so that p(-b) == 1 - p(b) holds bit for bit
    return np.where(arg >= 0, upper, 1.0 - upper)[()]


def erf_probability(bias: BiasSpec, lam) -> float:
    """Steady-state probability for an ideal step bias injected at ``bias.tau0``."""
    _require_above_threshold(lam)
    if bias.extinction_floor != 0:
        raise ValidationError(
            "closed form assumes an ideal step bias", "bias.extinction_floor"
        )
    return float(probability_curve(bias.amplitude, lam, bias.tau0))


def bias_width(lam, tau0=0.0, extra_var=0.0) -> float:
    """Standard deviation, in bias units, of the erf transition.

    ``extra_var`` adds the variance (displacement units) of a state
    prepared before the pump is switched on.
    """
    _require_above_threshold(lam)
    k = lam - 1.0
    var_x = lam / (2 * k) + extra_var
    return math.sqrt(var_x) * k * math.exp(k * tau0) / math.sqrt(2.0)


def bias_to_axis(b, lam, tau0=0.0):
    """Map bias values onto the displacement axis of the measured marginal.

    A state component at ``x`` is exactly cancelled by a bias whose
    displacement is ``-x``, hence the sign flip.
    """
    _require_above_threshold(lam)
    k = lam - 1.0
    return -math.sqrt(2.0) * np.asarray(b, dtype=float) * math.exp(-k * tau0) / k


def theoretical_marginal(sigma_b, lam, tau0=0.0) -> float:
    """Convert an erf width in bias units to a displacement-axis std."""
    _require_above_threshold(lam)
    if sigma_b < 0:
        raise ValidationError("width must be >= 0", "sigma_b")
    k = lam - 1.0
    return math.sqrt(2.0) * sigma_b * math.exp(-k * tau0) / k
