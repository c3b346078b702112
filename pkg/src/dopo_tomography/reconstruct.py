"""From bias-probability curves to a 2D Husimi Q function.

The erf transition of each curve is fitted by binomial maximum
likelihood, its derivative gives the marginal Q along the measurement
angle, and the marginals are combined by filtered back-projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import ndimage, optimize, signal, special, stats

from dopo_tomography.model import (
    ValidationError,
    bias_to_axis,
    theoretical_marginal,
)

__all__ = [
    "IllConditioned",
    "AxisMismatch",
    "ErfFit",
    "MarginalQ",
    "Sinogram",
    "QGrid",
    "SqueezingResult",
    "Ellipse",
    "fit_erf",
    "sensitivity_to_marginal",
    "build_sinogram",
    "fold_curve",
    "gaussian_marginal",
    "gaussian_grid",
    "forward_project",
    "forward_sinogram",
    "ramp_filter",
    "inverse_radon",
    "upsample_angles",
    "squeezing_db",
    "contour_ellipse",
    "grid_moments",
]


class IllConditioned(ValueError):
    """The curve carries no resolvable transition."""


class AxisMismatch(ValidationError):
    pass


@dataclass
class ErfFit:
    center: float
    width: float
    log_likelihood: float
    covariance: np.ndarray

    @property
    def center_err(self) -> float:
        return float(math.sqrt(self.covariance[0, 0]))

    @property
    def width_err(self) -> float:
        return float(math.sqrt(self.covariance[1, 1]))

    def width_ci(self, confidence=0.95):
        z = stats.norm.ppf(0.5 + confidence / 2)
        return self.width - z * self.width_err, self.width + z * self.width_err

    def model(self, b):
        return special.ndtr((np.asarray(b, dtype=float) - self.center) / self.width)


@dataclass
class MarginalQ:
    theta: float
    axis: np.ndarray
    density: np.ndarray
    normalized: bool = True
    # parametric summary (displacement units), None for raw marginals
    center: Optional[float] = None
    std: Optional[float] = None
    std_err: Optional[float] = None

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float)
        self.density = np.asarray(self.density, dtype=float)
        if self.axis.shape != self.density.shape or self.axis.ndim != 1:
            raise ValidationError("axis and density must be 1D of equal length", "marginal.axis")
        # intermediate (unnormalized) views, e.g. interpolated angles, may dip below 0
        if self.normalized and np.any(self.density < 0):
            raise ValidationError("density must be nonnegative", "marginal.density")

    @property
    def mass(self) -> float:
        return float(np.trapezoid(self.density, self.axis))

    def moments(self):
        m = self.mass
        mean = np.trapezoid(self.axis * self.density, self.axis) / m
        var = np.trapezoid((self.axis - mean) ** 2 * self.density, self.axis) / m
        return float(mean), float(var)

    @property
    def variance(self) -> float:
        if self.std is not None:
            return self.std**2
        return self.moments()[1]


@dataclass
class Sinogram:
    marginals: list
    source: str = ""

    def __post_init__(self):
        if not self.marginals:
            raise ValidationError("no marginals", "sinogram")
        ref = self.marginals[0].axis
        for m in self.marginals[1:]:
            if m.axis.shape != ref.shape or not np.allclose(m.axis, ref, rtol=0, atol=1e-12):
                raise AxisMismatch(
                    f"marginal at theta={m.theta:.6g} uses a different axis grid",
                    "sinogram.axis",
                )
        th = self.angles
        if np.any(np.diff(th) <= 0):
            raise ValidationError("angles must be strictly increasing", "sinogram.angles")
        if np.any(th < 0) or np.any(th >= math.pi):
            raise ValidationError("angles must lie in [0, pi)", "sinogram.angles")

    @property
    def angles(self) -> np.ndarray:
        return np.array([m.theta for m in self.marginals])

    @property
    def axis(self) -> np.ndarray:
        return self.marginals[0].axis

    def matrix(self) -> np.ndarray:
        """Densities stacked as (n_angles, n_axis)."""
        return np.vstack([m.density for m in self.marginals])


@dataclass
class QGrid:
    """Q values on a square grid; ``values[iy, ix]`` at ``(axis[ix], axis[iy])``."""

    values: np.ndarray
    axis: np.ndarray
    provenance: str = ""
    negative_fraction: float = 0.0

    @property
    def cell(self) -> float:
        return float(self.axis[1] - self.axis[0])

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.cell**2)

    def normalized(self) -> "QGrid":
        m = self.mass
        vals = self.values / m if m != 0 else self.values.copy()
        return QGrid(vals, self.axis, self.provenance, self.negative_fraction)


@dataclass
class SqueezingResult:
    angles: np.ndarray
    db: np.ndarray
    db_err: np.ndarray
    angle_min: float
    db_min: float
    db_max: float
    uncertainty: float
    var_state: np.ndarray = field(default=None)
    var_vacuum: np.ndarray = field(default=None)


@dataclass
class Ellipse:
    center: tuple
    semi_major: float
    semi_minor: float
    minor_angle: float  # direction of the minor axis, in [0, pi)

    @property
    def axis_ratio(self) -> float:
        return self.semi_major / self.semi_minor


# -- erf fitting -------------------------------------------------------------


def _nll(params, b, n, k):
    c, log_s = params
    z = (b - c) / math.exp(log_s)
    return -float(np.sum(k * special.log_ndtr(z) + (n - k) * special.log_ndtr(-z)))


def _nll_grad(params, b, n, k):
    c, log_s = params
    s = math.exp(log_s)
    z = (b - c) / s
    logphi = stats.norm.logpdf(z)
    up = np.exp(logphi - special.log_ndtr(z))
    down = np.exp(logphi - special.log_ndtr(-z))
    dz = k * up - (n - k) * down
    return np.array([np.sum(dz) / s, np.sum(dz * z)])


def _initial_guess(b, p):
    order = np.argsort(b)
    b, p = b[order], np.maximum.accumulate(p[order])
    span = b[-1] - b[0]

    def crossing(level):
        idx = np.searchsorted(p, level)
        if idx == 0:
            return b[0]
        if idx >= len(b):
            return b[-1]
        p0, p1 = p[idx - 1], p[idx]
        if p1 == p0:
            return b[idx]
        return b[idx - 1] + (level - p0) * (b[idx] - b[idx - 1]) / (p1 - p0)

    c0 = crossing(0.5)
    s0 = 0.5 * (crossing(0.8413) - crossing(0.1587))
    if not s0 > 0:
        s0 = span / 4
    return c0, max(s0, span / (4 * len(b)))


def fit_erf(curve) -> ErfFit:
    """Binomial maximum-likelihood fit of ``p = Phi((b - c) / sigma_b)``.

    The covariance of ``(center, width)`` is the inverse observed
    information at the optimum.
    """
    b = np.asarray(curve.b, dtype=float)
    n = np.asarray(curve.n, dtype=float)
    k = np.asarray(curve.n_positive, dtype=float)
    if b.size < 5:
        raise ValidationError(f"need at least 5 points, got {b.size}", "curve.points")
    p = k / n
    lo, hi = curve.ci
    if np.all((lo <= 0.5) & (hi >= 0.5)):
        raise IllConditioned("every point is compatible with p = 0.5")
    span = float(b[-1] - b[0])

    c0, s0 = _initial_guess(b, p)
    res = optimize.minimize(
        _nll, x0=[c0, math.log(s0)], args=(b, n, k), jac=_nll_grad, method="BFGS",
        options={"gtol": 1e-9, "maxiter": 500},
    )
    if not np.all(np.isfinite(res.x)):
        raise IllConditioned("fit did not converge")
    c, s = float(res.x[0]), float(math.exp(res.x[1]))
    if s > 10 * span or abs(c - 0.5 * (b[0] + b[-1])) > 10 * span:
        raise IllConditioned(f"transition not resolved by the bias grid (width {s:.3g})")

    hess = _observed_information(c, s, b, n, k)
    try:
        cov = np.linalg.inv(hess)
    except np.linalg.LinAlgError as exc:
        raise IllConditioned("singular information matrix") from exc
    if not (cov[0, 0] > 0 and cov[1, 1] > 0):
        raise IllConditioned("information matrix is not positive definite")
    return ErfFit(center=c, width=s, log_likelihood=-float(res.fun), covariance=cov)


def _observed_information(c, s, b, n, k):
    # Hessian of the negative log-likelihood in (center, width)
    def grad(cs):
        g = _nll_grad([cs[0], math.log(cs[1])], b, n, k)
        return np.array([g[0], g[1] / cs[1]])

    x0 = np.array([c, s])
    h = 1e-5 * max(s, 1e-12)
    out = np.empty((2, 2))
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        out[:, i] = (grad(x0 + e) - grad(x0 - e)) / (2 * h)
    return 0.5 * (out + out.T)


# -- marginals -------------------------------------------------------------


def _default_axis(center, std, n=257, half_width=6.0):
    return np.linspace(center - half_width * std, center + half_width * std, n)


def gaussian_marginal(theta, axis, mean=(0.0, 0.0), cov=None) -> MarginalQ:
    """Analytic projection of a 2D Gaussian onto the axis at ``theta``."""
    cov = np.eye(2) * 0.5 if cov is None else np.asarray(cov, dtype=float)
    u = np.array([math.cos(theta), math.sin(theta)])
    mu = float(u @ np.asarray(mean, dtype=float))
    var = float(u @ cov @ u)
    axis = np.asarray(axis, dtype=float)
    dens = np.exp(-0.5 * (axis - mu) ** 2 / var) / math.sqrt(2 * math.pi * var)
    return MarginalQ(theta, axis, dens, True, mu, math.sqrt(var), None)


def sensitivity_to_marginal(
    curve,
    fit: Optional[ErfFit],
    lam: float,
    tau0: float = 0.0,
    mode: str = "parametric",
    axis=None,
    theta=None,
) -> MarginalQ:
    """Marginal Q along the curve's angle from the bias sensitivity.

    The displacement axis is ``x = -sqrt(2) b exp(-(lam-1) tau0) / (lam-1)``.
    ``parametric`` differentiates the fitted erf; ``nonparametric``
    takes smoothed central differences of the measured probabilities.
    """
    if not lam > 1:
        raise ValidationError("pump strength must be above threshold", "lambda")
    theta = curve.theta if theta is None else theta
    if mode == "parametric":
        if fit is None:
            raise ValidationError("parametric mode needs an erf fit", "fit")
        mu = float(bias_to_axis(fit.center, lam, tau0))
        sd = theoretical_marginal(fit.width, lam, tau0)
        sd_err = theoretical_marginal(fit.width_err, lam, tau0)
        axis = _default_axis(mu, sd) if axis is None else np.asarray(axis, dtype=float)
        dens = np.exp(-0.5 * ((axis - mu) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
        return MarginalQ(theta, axis, dens, True, mu, sd, sd_err)
    if mode != "nonparametric":
        raise ValidationError(f"unknown mode {mode!r}", "mode")

    b = np.asarray(curve.b, dtype=float)
    if b.size < 9:
        raise ValidationError(f"need at least 9 points, got {b.size}", "curve.points")
    p = np.asarray(curve.p_hat, dtype=float)
    steps = np.diff(b)
    if np.allclose(steps, steps[0], rtol=1e-9, atol=0):
        dpdb = signal.savgol_filter(p, 5, 3, deriv=1, delta=steps[0], mode="interp")
    else:
        dpdb = np.gradient(p, b)
    x = bias_to_axis(b, lam, tau0)
    jac = abs(float(bias_to_axis(1.0, lam, tau0)))
    dens_x = np.clip(dpdb / jac, 0.0, None)
    x, dens_x = x[::-1], dens_x[::-1]
    if axis is None:
        axis = np.linspace(x[0], x[-1], 257)
    axis = np.asarray(axis, dtype=float)
    dens = np.interp(axis, x, dens_x, left=0.0, right=0.0)
    mass = np.trapezoid(dens, axis)
    if mass > 0:
        dens = dens / mass
    return MarginalQ(theta, axis, dens, mass > 0)


def fold_curve(curve):
    """Map a curve measured at ``theta >= pi`` onto ``theta - pi``.

    Uses ``p(b | theta + pi) = 1 - p(-b | theta)``.
    """
    if curve.theta < math.pi:
        return curve
    return replace(
        curve,
        theta=curve.theta - math.pi,
        b=-curve.b[::-1],
        n=curve.n[::-1],
        n_positive=(curve.n - curve.n_positive)[::-1],
    )


def build_sinogram(curves, lam=None, mode="parametric", axis=None, n_axis=128) -> Sinogram:
    """Fit every curve and put its marginal on a shared symmetric axis.

    Curves at ``theta`` in ``[pi, 2 pi)`` are folded back first.
    """
    curves = sorted((fold_curve(c) for c in curves), key=lambda c: c.theta)
    fits = [fit_erf(c) if mode == "parametric" else None for c in curves]
    if axis is None:
        extent = 0.0
        for c, f in zip(curves, fits):
            lam_c = c.lam if lam is None else lam
            if f is not None:
                mu = abs(float(bias_to_axis(f.center, lam_c, c.tau0)))
                sd = theoretical_marginal(f.width, lam_c, c.tau0)
                extent = max(extent, mu + 4.5 * sd)
            else:
                x = bias_to_axis(np.asarray(c.b), lam_c, c.tau0)
                extent = max(extent, float(np.max(np.abs(x))))
        axis = np.linspace(-extent, extent, n_axis)
    marginals = [
        sensitivity_to_marginal(c, f, c.lam if lam is None else lam, c.tau0, mode, axis)
        for c, f in zip(curves, fits)
    ]
    return Sinogram(marginals)


# -- Radon transform -------------------------------------------------------


def gaussian_grid(axis, mean=(0.0, 0.0), cov=None) -> QGrid:
    """Analytic normalized Gaussian sampled on the square grid ``axis``."""
    axis = np.asarray(axis, dtype=float)
    cov = np.eye(2) * 0.5 if cov is None else np.asarray(cov, dtype=float)
    inv = np.linalg.inv(cov)
    xx, yy = np.meshgrid(axis - mean[0], axis - mean[1])
    quad = inv[0, 0] * xx**2 + 2 * inv[0, 1] * xx * yy + inv[1, 1] * yy**2
    vals = np.exp(-0.5 * quad) / (2 * math.pi * math.sqrt(np.linalg.det(cov)))
    return QGrid(vals, axis, "analytic")


def forward_project(q: QGrid, theta: float) -> MarginalQ:
    """Line integrals of ``q`` perpendicular to the axis at angle ``theta``.

    The grid is sampled along rotated lines with bilinear interpolation
    and summed; the result lives on ``q.axis``.
    """
    axis = q.axis
    d = q.cell
    c, s = math.cos(theta), math.sin(theta)
    uu, vv = np.meshgrid(axis, axis, indexing="ij")
    x = uu * c - vv * s
    y = uu * s + vv * c
    coords = np.array([(y - axis[0]) / d, (x - axis[0]) / d])
    vals = ndimage.map_coordinates(q.values, coords, order=1, mode="constant", cval=0.0)
    dens = vals.sum(axis=1) * d
    return MarginalQ(theta, axis.copy(), dens, True)


def forward_sinogram(q: QGrid, angles) -> Sinogram:
    return Sinogram([forward_project(q, float(t)) for t in angles], q.provenance)


def ramp_filter(n: int, spacing: float, window: Optional[str] = None) -> np.ndarray:
    """Frequency response of the band-limited Ram-Lak kernel, padded length ``n``.

    Built from the spatial kernel (1/4, -1/(pi k)^2 for odd k) so the zero
    frequency is handled exactly.
    """
    k = np.concatenate([np.arange(0, n // 2 + 1), np.arange(-(n // 2) + (n % 2 == 0), 0)])
    k = k[:n]
    h = np.zeros(n)
    h[k == 0] = 0.25
    odd = k % 2 == 1
    h[odd] = -1.0 / (math.pi * k[odd]) ** 2
    resp = np.real(np.fft.fft(h)) / spacing
    if window is None or window == "ramlak":
        return resp
    freq = np.abs(np.fft.fftfreq(n))
    if window == "hann":
        return resp * (0.5 + 0.5 * np.cos(2 * math.pi * freq))
    if window == "shepp-logan":
        w = np.ones(n)
        nz = freq != 0
        w[nz] = np.sin(math.pi * freq[nz]) / (math.pi * freq[nz])
        return resp * w
    raise ValidationError(f"unknown window {window!r}", "window")


def _angle_weights(angles):
    th = np.asarray(angles, dtype=float)
    nxt = np.roll(th, -1)
    nxt[-1] += math.pi
    prv = np.roll(th, 1)
    prv[0] -= math.pi
    return 0.5 * (nxt - prv)


def upsample_angles(sinogram: Sinogram, factor: int) -> Sinogram:
    """Trigonometric interpolation of a sinogram onto ``factor`` times more angles.

    Uses ``P(theta + pi, u) = P(theta, -u)`` to close the period, so the
    angles must be uniformly spaced over ``[0, pi)`` and the axis
    symmetric about zero.
    """
    if factor == 1:
        return sinogram
    th = sinogram.angles
    k = len(th)
    if not np.allclose(np.diff(th), math.pi / k, rtol=1e-6, atol=1e-9):
        raise ValidationError("angles must be uniformly spaced over [0, pi)", "sinogram.angles")
    axis = sinogram.axis
    if not np.allclose(axis, -axis[::-1], atol=1e-9 * np.abs(axis).max()):
        raise AxisMismatch("axis must be symmetric about zero", "sinogram.axis")
    mat = sinogram.matrix()
    spec = np.fft.fft(np.vstack([mat, mat[:, ::-1]]), axis=0)
    m = 2 * k * factor
    out = np.zeros((m, mat.shape[1]), dtype=complex)
    out[:k] = spec[:k]
    out[-k + 1:] = spec[-k + 1:]
    out[k] = 0.5 * spec[k]
    out[-k] = 0.5 * spec[k]
    dense = np.real(np.fft.ifft(out, axis=0)) * factor
    angles = th[0] + np.arange(k * factor) * math.pi / (k * factor)
    return Sinogram(
        [MarginalQ(float(a), axis, row, False) for a, row in zip(angles, dense[: k * factor])],
        sinogram.source,
    )


def inverse_radon(
    sinogram: Sinogram,
    grid_size: Optional[int] = None,
    window=None,
    angular_upsample: int = 1,
) -> QGrid:
    """Filtered back-projection onto a square grid spanning the sinogram axis.

    Values outside the circle inscribed in the axis range are zeroed.
    Negative values are then clipped and the grid renormalized to unit
    mass; the clipped fraction of (positive) mass is kept in
    ``negative_fraction``.  ``angular_upsample > 1`` interpolates the
    sinogram in angle first, which suppresses streaks from sparse views.
    """
    if len(sinogram.angles) < 4:
        raise ValidationError(
            f"need at least 4 angles, got {len(sinogram.angles)}", "sinogram.angles"
        )
    sinogram = upsample_angles(sinogram, angular_upsample)
    angles = sinogram.angles
    axis = sinogram.axis
    n = axis.size
    d = float(axis[1] - axis[0])
    if not np.allclose(np.diff(axis), d, rtol=1e-9, atol=0):
        raise AxisMismatch("axis must be uniformly spaced", "sinogram.axis")
    pad = 1 << int(math.ceil(math.log2(2 * n)))
    resp = ramp_filter(pad, d, window)
    proj = np.zeros((len(angles), pad))
    proj[:, :n] = sinogram.matrix()
    filtered = np.real(np.fft.ifft(np.fft.fft(proj, axis=1) * resp, axis=1))[:, :n]

    out_axis = axis if grid_size is None else np.linspace(axis[0], axis[-1], grid_size)
    xx, yy = np.meshgrid(out_axis, out_axis)
    recon = np.zeros_like(xx)
    for th, w, row in zip(angles, _angle_weights(angles), filtered):
        u = xx * math.cos(th) + yy * math.sin(th)
        recon += w * np.interp(u, axis, row, left=0.0, right=0.0)
    # outside the inscribed circle the projections are truncated
    radius = min(abs(axis[0]), abs(axis[-1]))
    recon[xx**2 + yy**2 > radius**2] = 0.0

    pos = recon[recon > 0].sum()
    neg = -recon[recon < 0].sum()
    frac = float(neg / pos) if pos > 0 else 0.0
    vals = np.clip(recon, 0.0, None)
    cell = float(out_axis[1] - out_axis[0])
    mass = vals.sum() * cell**2
    if mass > 0:
        vals = vals / mass
    return QGrid(vals, out_axis, sinogram.source or "inverse_radon", frac)


# -- metrics ---------------------------------------------------------------


def squeezing_db(marginals: Sinogram, vacuum_reference: Sinogram) -> SqueezingResult:
    """Per-angle squeezing ``10 log10(var_vacuum / var_state)``.

    ``angle_min`` is the angle of the narrowest state marginal.
    Uncertainties propagate the fit width errors to first order.
    """
    if len(marginals.marginals) != len(vacuum_reference.marginals) or not np.allclose(
        marginals.angles, vacuum_reference.angles
    ):
        raise AxisMismatch("state and vacuum sinograms use different angles", "angles")
    vs = np.array([m.variance for m in marginals.marginals])
    vv = np.array([m.variance for m in vacuum_reference.marginals])
    if np.any(vs <= 0) or np.any(vv <= 0):
        raise ValidationError("variances must be positive", "variance")
    db = 10 * np.log10(vv / vs)

    def rel(ms):
        return np.array(
            [(m.std_err / m.std) if (m.std_err is not None and m.std) else 0.0 for m in ms]
        )

    db_err = 20 / math.log(10) * np.hypot(rel(marginals.marginals), rel(vacuum_reference.marginals))
    i_min = int(np.argmin(vs))
    return SqueezingResult(
        angles=marginals.angles,
        db=db,
        db_err=db_err,
        angle_min=float(marginals.angles[i_min]),
        db_min=float(db.min()),
        db_max=float(db.max()),
        uncertainty=float(db_err[i_min]),
        var_state=vs,
        var_vacuum=vv,
    )


def grid_moments(q: QGrid):
    """Mean (2,) and covariance (2, 2) of a Q grid."""
    xx, yy = np.meshgrid(q.axis, q.axis)
    w = q.values / q.values.sum()
    mx, my = float((w * xx).sum()), float((w * yy).sum())
    cxx = float((w * (xx - mx) ** 2).sum())
    cyy = float((w * (yy - my) ** 2).sum())
    cxy = float((w * (xx - mx) * (yy - my)).sum())
    return np.array([mx, my]), np.array([[cxx, cxy], [cxy, cyy]])


def contour_ellipse(q: QGrid, level: float = math.exp(-1), n_rays: int = 180) -> Ellipse:
    """Ellipse fitted to the ``level * max`` contour of ``q``.

    Rays from the peak locate the contour crossing; a centered conic is
    fitted to the crossing points by least squares.
    """
    vals = q.values
    iy, ix = np.unravel_index(np.argmax(vals), vals.shape)
    d = q.cell
    target = level * vals[iy, ix]
    r = np.arange(0, vals.shape[0]) * d * 0.5
    pts = []
    for phi in np.linspace(0, 2 * math.pi, n_rays, endpoint=False):
        cx = ix + r / d * math.cos(phi)
        cy = iy + r / d * math.sin(phi)
        prof = ndimage.map_coordinates(vals, [cy, cx], order=1, mode="constant", cval=0.0)
        below = np.nonzero(prof < target)[0]
        if below.size == 0 or below[0] == 0:
            continue
        j = below[0]
        f0, f1 = prof[j - 1], prof[j]
        rr = r[j - 1] + (f0 - target) / (f0 - f1) * (r[j] - r[j - 1])
        pts.append((rr * math.cos(phi), rr * math.sin(phi)))
    pts = np.array(pts)
    if len(pts) < 5:
        raise ValidationError("contour not found inside the grid", "qgrid")
    x, y = pts[:, 0], pts[:, 1]
    design = np.column_stack([x * x, 2 * x * y, y * y])
    a, bxy, c = np.linalg.lstsq(design, np.ones(len(x)), rcond=None)[0]
    evals, evecs = np.linalg.eigh(np.array([[a, bxy], [bxy, c]]))
    # larger eigenvalue <-> shorter semi-axis
    semi = 1 / np.sqrt(evals)
    minor_vec = evecs[:, 1]
    angle = math.atan2(minor_vec[1], minor_vec[0]) % math.pi
    return Ellipse(
        center=(float(q.axis[ix]), float(q.axis[iy])),
        semi_major=float(semi[0]),
        semi_minor=float(semi[1]),
        minor_angle=angle,
    )
