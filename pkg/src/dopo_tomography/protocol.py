"""Virtual experiments: state preparation, bias sweeps and probability estimates.

A measurement at tomography angle ``theta`` rotates the pump so that the
amplified quadrature lies along ``theta`` when the bias is injected; the
bias is injected along the same axis.  Probabilities are the fraction
of trajectories ending in the phase-0 steady state.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from dopo_tomography.model import BiasSpec, GaussianStateSpec, ValidationError
from dopo_tomography.rng import NormalStream, counter_mix, trajectory_keys
from dopo_tomography.sde import (
    IntegratorConfig,
    PointSampler,
    PumpSegment,
    Schedule,
    integrate_batch,
)

__all__ = [
    "PreparationSpec",
    "GaussianSampler",
    "RelaxationSampler",
    "ProbabilityEstimate",
    "BiasProbabilityCurve",
    "SweepPlan",
    "NonlinearStageWarning",
    "prepare_initial_sampler",
    "wilson_interval",
    "measure_probability",
    "predicted_transition",
    "sweep_bias",
    "sweep_phase",
    "dynamics_scan",
    "PRESETS",
]

_PREP_TAG = 0x243F6A8885A308D3
_CHUNK = 32768


class NonlinearStageWarning(UserWarning):
    """The erf model is being applied where saturation matters."""


@dataclass(frozen=True)
class PreparationSpec:
    """How the intracavity state is prepared before the measurement.

    ``kind`` is one of ``"vacuum_point"``, ``"analytic_gaussian"`` or
    ``"sde_relaxation"`` (below-threshold pumping from the point vacuum).
    """

    kind: str = "vacuum_point"
    gaussian: Optional[GaussianStateSpec] = None
    lambda_prep: float = 0.0
    relax_time: float = 20.0
    dt: float = 0.005

    def __post_init__(self):
        if self.kind not in ("vacuum_point", "analytic_gaussian", "sde_relaxation"):
            raise ValidationError(f"unknown kind {self.kind!r}", "preparation.kind")
        if self.kind == "analytic_gaussian" and self.gaussian is None:
            raise ValidationError("a Gaussian state is required", "preparation.gaussian")
        if self.kind == "sde_relaxation":
            if not 0.0 <= self.lambda_prep < 1.0:
                raise ValidationError(
                    f"must lie in [0, 1), got {self.lambda_prep}", "preparation.lambda_prep"
                )
            if not self.relax_time > 0:
                raise ValidationError("must be > 0", "preparation.relax_time")

    @classmethod
    def vacuum(cls):
        return cls()

    @classmethod
    def analytic(cls, spec: GaussianStateSpec):
        return cls(kind="analytic_gaussian", gaussian=spec)

    @classmethod
    def relaxation(cls, lambda_prep, relax_time=20.0, dt=0.005):
        return cls(
            kind="sde_relaxation", lambda_prep=lambda_prep, relax_time=relax_time, dt=dt
        )

    def moments(self):
        """Analytic mean (2,) and covariance (2, 2) of the prepared state."""
        if self.kind == "vacuum_point":
            return np.zeros(2), np.zeros((2, 2))
        if self.kind == "analytic_gaussian":
            g = self.gaussian
            return np.array([g.mean.re, g.mean.im]), g.covariance()
        lam, t = self.lambda_prep, self.relax_time
        # stationary OU variances, relaxed for a finite time from zero
        vx = lam / (2 * (1 - lam)) * -math.expm1(-2 * (1 - lam) * t)
        vy = lam / (2 * (1 + lam)) * -math.expm1(-2 * (1 + lam) * t)
        return np.zeros(2), np.diag([vx, vy])


@dataclass(frozen=True)
class GaussianSampler:
    spec: GaussianStateSpec

    def sample(self, keys) -> np.ndarray:
        n1, n2 = NormalStream(_prep_keys(keys)).pair(0)
        chol = np.linalg.cholesky(self.spec.covariance())
        out = np.empty((len(keys), 2))
        out[:, 0] = self.spec.mean.re + chol[0, 0] * n1
        out[:, 1] = self.spec.mean.im + chol[1, 0] * n1 + chol[1, 1] * n2
        return out


@dataclass(frozen=True)
class RelaxationSampler:
    """Endpoints of below-threshold trajectories started at the point vacuum."""

    lambda_prep: float
    relax_time: float
    dt: float = 0.005

    def sample(self, keys) -> np.ndarray:
        n = len(keys)
        cfg = IntegratorConfig(dt=self.dt, tau_end=self.relax_time)
        sched = Schedule.constant(self.lambda_prep)
        x, y = integrate_batch(np.zeros(n), np.zeros(n), sched, cfg, _prep_keys(keys))
        return np.column_stack([x, y])


def _prep_keys(keys):
    keys = np.asarray(keys, dtype=np.uint64)
    return keys ^ np.uint64(_PREP_TAG)


def prepare_initial_sampler(spec: PreparationSpec, seed=None):
    """Sampler of lab-frame initial points for ``spec``.

    Samples are keyed by trajectory key, so ``seed`` only matters for
    callers that draw keys from it; it is accepted for symmetry with the
    rest of the API.
    """
    if spec.kind == "vacuum_point":
        return PointSampler()
    if spec.kind == "analytic_gaussian":
        return GaussianSampler(spec.gaussian)
    return RelaxationSampler(spec.lambda_prep, spec.relax_time, spec.dt)


def wilson_interval(k, n, confidence=0.95):
    """Wilson score interval for ``k`` successes out of ``n``."""
    z = stats.norm.ppf(0.5 + confidence / 2)
    k = np.asarray(k, dtype=float)
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = np.where(k <= 0, 0.0, np.clip(centre - half, 0.0, 1.0))
    hi = np.where(k >= n, 1.0, np.clip(centre + half, 0.0, 1.0))
    return lo[()], hi[()]


@dataclass(frozen=True)
class ProbabilityEstimate:
    n: int
    n_positive: int

    @property
    def p_hat(self) -> float:
        return self.n_positive / self.n

    @property
    def ci(self):
        lo, hi = wilson_interval(self.n_positive, self.n)
        return float(lo), float(hi)


def _measurement_schedule(lam, theta, tau0, bias, saturation, rise, amplify_phase):
    phase = ((0.0, theta),)
    if amplify_phase is not None and amplify_phase != theta:
        if tau0 > 0:
            phase = ((0.0, amplify_phase), (tau0, theta))
    return Schedule(
        pump=(PumpSegment(0.0, lam, rise),),
        phase=phase,
        bias=BiasSpec(
            amplitude=bias.amplitude,
            tau0=bias.tau0,
            phase=theta + bias.phase,
            extinction_floor=bias.extinction_floor,
        ),
        saturation=saturation,
    )


def _horizon(lam, tau0, saturation, rise):
    if saturation is not None:
        return 20.0
    return tau0 + rise + 6.0 / (lam - 1.0)


def _count_positive(sampler, schedule, cfg, keys, amplitudes, leaks=None):
    hits = np.zeros(len(keys), dtype=bool)
    for a in range(0, len(keys), _CHUNK):
        sl = slice(a, a + _CHUNK)
        init = sampler.sample(keys[sl])
        x, _ = integrate_batch(
            init[:, 0], init[:, 1], schedule, cfg, keys[sl],
            amplitudes=None if amplitudes is None else amplitudes[sl],
            leaks=None if leaks is None else leaks[sl],
            index_offset=a,
        )
        hits[sl] = x >= 0.0
    return hits


def measure_probability(
    prep: PreparationSpec,
    bias: BiasSpec,
    theta: float,
    lambda_meas: float,
    n: int,
    seed: int,
    *,
    dt: float = 0.005,
    saturation=None,
    rise: float = 0.0,
    amplify_phase=None,
) -> ProbabilityEstimate:
    """Fraction of ``n`` shots that end in the phase-0 steady state.

    ``bias.phase`` is taken relative to the measurement axis ``theta``.
    ``amplify_phase`` sets the amplified axis before injection (defaults
    to ``theta``, i.e. the pump is rotated from the start).
    """
    if not lambda_meas > 1:
        raise ValidationError("measurement pump must be above threshold", "lambda_meas")
    if n < 100:
        raise ValidationError(f"must be >= 100, got {n}", "n")
    if seed is None:
        raise ValidationError("an explicit seed is required", "seed")
    sched = _measurement_schedule(
        lambda_meas, theta, bias.tau0, bias, saturation, rise, amplify_phase
    )
    cfg = IntegratorConfig(dt=dt, tau_end=_horizon(lambda_meas, bias.tau0, saturation, rise))
    sampler = prepare_initial_sampler(prep)
    keys = trajectory_keys(seed, 0, n)
    hits = _count_positive(sampler, sched, cfg, keys, None)
    return ProbabilityEstimate(n=n, n_positive=int(hits.sum()))


def predicted_transition(prep, lam, theta, tau0=0.0, amplify_phase=None):
    """Analytic (center, width) of the linear-stage erf curve in bias units.

    Propagates the prepared state's moments through the linear dynamics
    up to injection, then applies the static erf law.
    """
    k = lam - 1.0
    phi = theta if amplify_phase is None else amplify_phase
    mean, cov = prep.moments()
    c, s = math.cos(phi), math.sin(phi)
    rot = np.array([[c, s], [-s, c]])
    m = rot @ mean
    v = rot @ cov @ rot.T
    gx, gy = math.exp(k * tau0), math.exp(-(lam + 1) * tau0)
    m = np.array([m[0] * gx, m[1] * gy])
    v = np.array(
        [
            [v[0, 0] * gx * gx + lam / (2 * k) * math.expm1(2 * k * tau0), v[0, 1] * gx * gy],
            [v[1, 0] * gx * gy, v[1, 1] * gy * gy - lam / (2 * (lam + 1)) * math.expm1(-2 * (lam + 1) * tau0)],
        ]
    )
    d = theta - phi
    u = np.array([math.cos(d), math.sin(d)])
    mean_u = float(u @ m)
    var_u = float(u @ v @ u) + lam / (2 * k)
    return -mean_u * k / math.sqrt(2.0), math.sqrt(var_u) * k / math.sqrt(2.0)


@dataclass
class BiasProbabilityCurve:
    theta: float
    tau0: float
    lam: float
    b: np.ndarray
    n: np.ndarray
    n_positive: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        self.n = np.asarray(self.n, dtype=np.int64)
        self.n_positive = np.asarray(self.n_positive, dtype=np.int64)
        if not (self.b.shape == self.n.shape == self.n_positive.shape):
            raise ValidationError("point arrays must have equal length", "curve.points")
        if np.any(np.diff(self.b) <= 0):
            raise ValidationError("bias values must increase", "curve.b")
        if np.any(self.n_positive < 0) or np.any(self.n_positive > self.n):
            raise ValidationError("counts out of range", "curve.n_positive")

    @property
    def p_hat(self) -> np.ndarray:
        return self.n_positive / self.n

    @property
    def ci(self):
        return wilson_interval(self.n_positive, self.n)

    @property
    def points(self):
        lo, hi = self.ci
        return list(zip(self.b, self.p_hat, self.n, lo, hi))

    def __eq__(self, other):
        if not isinstance(other, BiasProbabilityCurve):
            return NotImplemented
        return (
            self.theta == other.theta
            and self.tau0 == other.tau0
            and self.lam == other.lam
            and np.array_equal(self.b, other.b)
            and np.array_equal(self.n, other.n)
            and np.array_equal(self.n_positive, other.n_positive)
            and self.meta == other.meta
        )


@dataclass(frozen=True)
class SweepPlan:
    """Grid of (theta, tau0, b) measurements sharing one preparation.

    ``b_grid=None`` picks ``n_bias`` points spanning ``span`` predicted
    widths around the predicted center of each curve.
    """

    prep: PreparationSpec = field(default_factory=PreparationSpec)
    theta_grid: tuple = (0.0,)
    tau0_grid: tuple = (0.0,)
    b_grid: Optional[tuple] = None
    n_per_point: int = 1000
    lambda_meas: float = 2.0
    seed: Optional[int] = None
    dt: float = 0.005
    saturation: Optional[float] = None
    rise: float = 0.0
    amplify_phase: Optional[float] = None
    n_bias: int = 21
    span: float = 4.0
    leak_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta_grid", tuple(float(t) for t in self.theta_grid))
        object.__setattr__(self, "tau0_grid", tuple(float(t) for t in self.tau0_grid))
        if self.b_grid is not None:
            object.__setattr__(self, "b_grid", tuple(float(b) for b in self.b_grid))
        if self.seed is None:
            raise ValidationError("an explicit seed is required", "sweep.seed")
        if not self.theta_grid:
            raise ValidationError("must not be empty", "sweep.theta_grid")
        if not self.tau0_grid:
            raise ValidationError("must not be empty", "sweep.tau0_grid")
        if any(not 0.0 <= t < math.pi for t in self.theta_grid):
            raise ValidationError("angles must lie in [0, pi)", "sweep.theta_grid")
        if any(t < 0 for t in self.tau0_grid):
            raise ValidationError("delays must be >= 0", "sweep.tau0_grid")
        if self.b_grid is not None:
            if len(self.b_grid) == 0:
                raise ValidationError("must not be empty", "sweep.b_grid")
            if any(b2 <= b1 for b1, b2 in zip(self.b_grid, self.b_grid[1:])):
                raise ValidationError("must be strictly increasing", "sweep.b_grid")
        if self.n_per_point < 100:
            raise ValidationError(
                f"must be >= 100, got {self.n_per_point}", "sweep.n_per_point"
            )
        if not self.lambda_meas > 1:
            raise ValidationError("must be > 1", "measurement.lambda")
        if not 0.0 <= self.leak_fraction <= 1.0:
            raise ValidationError("must lie in [0, 1]", "measurement.leak_fraction")
        if self.n_bias < 2:
            raise ValidationError("must be >= 2", "sweep.n_bias")
        if not self.dt > 0:
            raise ValidationError("must be > 0", "integrator.dt")
        if self.saturation is not None and not self.saturation > 0:
            raise ValidationError("cubic strength must be > 0", "measurement.saturation")
        if self.rise < 0:
            raise ValidationError("must be >= 0", "measurement.rise")
        if not self.span > 0:
            raise ValidationError("must be > 0", "sweep.span")
        if (self.lambda_meas - 1) * self.dt > 0.05 + 1e-12:
            raise ValidationError("(lambda - 1) * dt exceeds 0.05", "integrator.dt")

    def bias_grid(self, theta, tau0) -> np.ndarray:
        if self.b_grid is not None:
            return np.array(self.b_grid)
        c, w = predicted_transition(
            self.prep, self.lambda_meas, theta, tau0, self.amplify_phase
        )
        return c + w * np.linspace(-self.span, self.span, self.n_bias)


def _point_seed(seed, i_theta, i_tau, i_b):
    return counter_mix(counter_mix(counter_mix(seed, i_theta), i_tau), i_b)


def _warn_if_nonlinear(plan: SweepPlan, tau0):
    if plan.saturation is None:
        return
    lam = plan.lambda_meas
    k = lam - 1.0
    _, cov = plan.prep.moments()
    ms = cov[0, 0] * math.exp(2 * k * tau0) + lam / (2 * k) * math.expm1(2 * k * tau0)
    if plan.saturation * ms > 0.1 * k:
        warnings.warn(
            f"tau0={tau0:g} reaches the saturation stage; the erf model is degraded",
            NonlinearStageWarning,
            stacklevel=3,
        )


def sweep_bias(plan: SweepPlan, i_theta: int = 0, i_tau: int = 0) -> BiasProbabilityCurve:
    """Bias-probability curve for one (theta, tau0) of ``plan``."""
    theta = plan.theta_grid[i_theta]
    tau0 = plan.tau0_grid[i_tau]
    _warn_if_nonlinear(plan, tau0)
    b = plan.bias_grid(theta, tau0)
    n = plan.n_per_point
    seeds = [_point_seed(plan.seed, i_theta, i_tau, j) for j in range(len(b))]
    keys = np.concatenate([trajectory_keys(s, 0, n) for s in seeds])
    amplitudes = np.repeat(b, n)
    bias = BiasSpec(amplitude=1.0, tau0=tau0)  # amplitude overridden per trajectory
    leaks = plan.leak_fraction * amplitudes if plan.leak_fraction > 0 else None
    sched = _measurement_schedule(
        plan.lambda_meas, theta, tau0, bias, plan.saturation, plan.rise, plan.amplify_phase
    )
    cfg = IntegratorConfig(
        dt=plan.dt, tau_end=_horizon(plan.lambda_meas, tau0, plan.saturation, plan.rise)
    )
    sampler = prepare_initial_sampler(plan.prep)
    hits = _count_positive(sampler, sched, cfg, keys, amplitudes, leaks)
    counts = hits.reshape(len(b), n).sum(axis=1)
    meta = {
        "theta": theta,
        "tau0": tau0,
        "lambda": plan.lambda_meas,
        "n": n,
        "seed": plan.seed,
        "point_seeds": seeds,
        "prep": plan.prep.kind,
        "dt": plan.dt,
        "tau_end": cfg.tau_end,
        "saturation": plan.saturation,
        "leak_fraction": plan.leak_fraction,
    }
    return BiasProbabilityCurve(
        theta=theta, tau0=tau0, lam=plan.lambda_meas, b=b,
        n=np.full(len(b), n), n_positive=counts, meta=meta,
    )


def sweep_phase(plan: SweepPlan, i_tau: int = 0) -> list:
    """One curve per angle of ``plan.theta_grid`` (the raw sinogram)."""
    if np.any(np.diff(plan.theta_grid) <= 0):
        raise ValidationError("angles must be strictly increasing", "sweep.theta_grid")
    return [sweep_bias(plan, i, i_tau) for i in range(len(plan.theta_grid))]


def dynamics_scan(plan: SweepPlan, i_theta: int = 0) -> list:
    """One curve per injection delay of ``plan.tau0_grid``."""
    return [sweep_bias(plan, i_theta, j) for j in range(len(plan.tau0_grid))]


def _fig2(seed, angles=12, lambda_prep=0.8):
    return SweepPlan(
        prep=PreparationSpec.relaxation(lambda_prep, 20.0),
        theta_grid=tuple(np.arange(angles) * math.pi / angles),
        n_per_point=1000,
        lambda_meas=2.0,
        seed=seed,
    )


def _fig3(seed, delays=(0.0, 0.5, 1.0)):
    return SweepPlan(
        prep=PreparationSpec.vacuum(),
        tau0_grid=tuple(delays),
        n_per_point=10000,
        lambda_meas=2.0,
        amplify_phase=0.0,
        seed=seed,
    )


PRESETS = {"fig2": _fig2, "fig3": _fig3}
