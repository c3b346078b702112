"""Euler-Maruyama integration of the DOPO quadrature equations.

The state is kept in the frame aligned with the amplified quadrature of
the current pump phase.  With ``k = lam - 1``::

    dX = [ k X      - g (X^2 + Y^2) X + sqrt(2) b_x ] dt + sqrt(lam) dW_1
    dY = [-(lam+1) Y - g (X^2 + Y^2) Y + sqrt(2) b_y ] dt + sqrt(lam) dW_2

where ``(b_x, b_y)`` is the bias projected onto the pump-aligned frame.
Ensembles are vectorized over trajectories and driven by counter-based
noise, so a trajectory's path depends only on its own key.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from dopo_tomography.model import BiasSpec, PhasePoint, ValidationError
from dopo_tomography.rng import NormalStream, trajectory_keys

__all__ = [
    "PumpSegment",
    "Schedule",
    "IntegratorConfig",
    "Trajectory",
    "Ensemble",
    "DivergenceError",
    "PointSampler",
    "step",
    "integrate",
    "integrate_batch",
    "classify",
    "run_ensemble",
    "default_horizon",
]

SQRT2 = math.sqrt(2.0)
DIVERGENCE_LIMIT = 1e6
STABILITY_GUARD = 0.05


class DivergenceError(RuntimeError):
    """A trajectory left the ``|X|, |Y| <= 1e6`` box."""

    def __init__(self, tau, index=None):
        self.tau = tau
        self.index = index
        where = f" (trajectory {index})" if index is not None else ""
        super().__init__(f"trajectory diverged at tau={tau:.6g}{where}")


@dataclass(frozen=True)
class PumpSegment:
    """Pump level ``lam`` reached from the previous level over ``ramp``.

    The segment starts at ``start``; the pump ramps linearly for ``ramp``
    lifetimes and then holds.  The first segment ramps up from zero.
    """

    start: float
    lam: float
    ramp: float = 0.0


@dataclass(frozen=True)
class Schedule:
    pump: tuple = (PumpSegment(0.0, 2.0),)
    # (start, angle) pairs; angle of the amplified quadrature in phase space
    phase: tuple = ((0.0, 0.0),)
    bias: BiasSpec = field(default_factory=BiasSpec)
    saturation: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "pump", tuple(self.pump))
        object.__setattr__(self, "phase", tuple(tuple(p) for p in self.phase))
        if not self.pump:
            raise ValidationError("at least one segment required", "schedule.pump")
        starts = [s.start for s in self.pump]
        if starts[0] != 0.0:
            raise ValidationError("first segment must start at 0", "schedule.pump")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValidationError("segment times must increase", "schedule.pump")
        for i, seg in enumerate(self.pump):
            if seg.lam < 0:
                raise ValidationError("lambda must be >= 0", f"schedule.pump[{i}].lam")
            if seg.ramp < 0:
                raise ValidationError("ramp must be >= 0", f"schedule.pump[{i}].ramp")
        pstarts = [p[0] for p in self.phase]
        if not self.phase or pstarts[0] != 0.0:
            raise ValidationError("first phase segment must start at 0", "schedule.phase")
        if any(b <= a for a, b in zip(pstarts, pstarts[1:])):
            raise ValidationError("segment times must increase", "schedule.phase")
        if self.saturation is not None and not self.saturation > 0:
            raise ValidationError("cubic strength must be > 0", "schedule.saturation")

    @classmethod
    def constant(cls, lam, bias=None, theta_p=0.0, saturation=None, rise=0.0):
        return cls(
            pump=(PumpSegment(0.0, lam, rise),),
            phase=((0.0, theta_p),),
            bias=bias if bias is not None else BiasSpec(),
            saturation=saturation,
        )

    def lam(self, tau: float) -> float:
        prev = 0.0
        level = 0.0
        for seg in self.pump:
            if tau < seg.start:
                break
            if seg.ramp > 0 and tau < seg.start + seg.ramp:
                level = prev + (seg.lam - prev) * (tau - seg.start) / seg.ramp
            else:
                level = seg.lam
            prev = seg.lam
        return level

    def theta_p(self, tau: float) -> float:
        angle = self.phase[0][1]
        for start, a in self.phase:
            if tau < start:
                break
            angle = a
        return angle

    @property
    def lam_max(self) -> float:
        return max(s.lam for s in self.pump)


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 0.005
    tau_end: float = 6.0
    record_stride: int = 1
    # >1 builds each step's increment from that many finer draws, so a run
    # at dt with m substeps shares its Brownian path with one at dt/m
    noise_substeps: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError("must be > 0", "integrator.dt")
        if self.tau_end < self.dt:
            raise ValidationError("must be >= dt", "integrator.tau_end")
        if self.record_stride < 1:
            raise ValidationError("must be >= 1", "integrator.record_stride")
        if self.noise_substeps < 1:
            raise ValidationError("must be >= 1", "integrator.noise_substeps")

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.tau_end / self.dt + 1e-9))

    def check(self, schedule: Schedule):
        """Enforce the ``(lam_max - 1) dt <= 0.05`` stability guard."""
        if (schedule.lam_max - 1.0) * self.dt > STABILITY_GUARD + 1e-12:
            raise ValidationError(
                f"(lambda_max - 1) * dt = {(schedule.lam_max - 1) * self.dt:.4g} "
                f"exceeds {STABILITY_GUARD}",
                "integrator.dt",
            )


@dataclass
class Trajectory:
    times: np.ndarray
    x: np.ndarray
    y: Optional[np.ndarray]
    seed: int
    outcome: int


@dataclass
class Ensemble:
    outcomes: np.ndarray
    seeds: np.ndarray
    final_x: np.ndarray
    final_y: Optional[np.ndarray]
    base_seed: int
    trajectories: list = field(default_factory=list)

    @property
    def n_total(self) -> int:
        return int(self.outcomes.size)

    @property
    def n_positive(self) -> int:
        return int(self.outcomes.sum())

    @property
    def p_hat(self) -> float:
        return self.n_positive / self.n_total


@dataclass(frozen=True)
class PointSampler:
    """Point-mass initial condition (the vacuum of the SDE picture)."""

    re: float = 0.0
    im: float = 0.0

    def sample(self, keys) -> np.ndarray:
        out = np.empty((len(keys), 2))
        out[:, 0] = self.re
        out[:, 1] = self.im
        return out


def _bias_components(schedule: Schedule, tau: float):
    b = schedule.bias.value(tau)
    if b == 0.0:
        return 0.0, 0.0
    d = schedule.bias.phase - schedule.theta_p(tau)
    return b * math.cos(d), b * math.sin(d)


def _bias_field(schedule, tau, on, leak):
    # per-trajectory bias projected on the pump frame, or None when off
    b = on if tau >= schedule.bias.tau0 else leak
    if b is None:
        return None, None
    d = schedule.bias.phase - schedule.theta_p(tau)
    c, s = math.cos(d), math.sin(d)
    return (SQRT2 * c) * b if abs(c) > 1e-15 else None, (SQRT2 * s) * b if abs(s) > 1e-15 else None


def step(state: PhasePoint, tau: float, schedule: Schedule, dt: float, noise) -> PhasePoint:
    """Single Euler-Maruyama update in the pump-aligned frame."""
    lam = schedule.lam(tau)
    bx, by = _bias_components(schedule, tau)
    x, y = state.re, state.im
    sx = sy = 0.0
    if schedule.saturation is not None:
        r2 = x * x + y * y
        sx, sy = schedule.saturation * r2 * x, schedule.saturation * r2 * y
    amp = math.sqrt(lam * dt)
    x_new = x + ((lam - 1.0) * x - sx + SQRT2 * bx) * dt + amp * noise[0]
    y_new = y + (-(lam + 1.0) * y - sy + SQRT2 * by) * dt + amp * noise[1]
    return PhasePoint(x_new, y_new)


def _rotate(x, y, angle):
    c, s = math.cos(angle), math.sin(angle)
    return c * x + s * y, -s * x + c * y


def integrate_batch(
    x0,
    y0,
    schedule: Schedule,
    cfg: IntegratorConfig,
    keys,
    *,
    two_d: bool = True,
    record: bool = False,
    index_offset: int = 0,
    amplitudes=None,
    leaks=None,
):
    """Integrate many trajectories at once.

    ``x0``/``y0`` are lab-frame initial quadratures; one uint64 key per
    trajectory selects its noise stream.  ``amplitudes`` optionally
    overrides ``schedule.bias.amplitude`` per trajectory and ``leaks``
    the residual amplitude acting before injection.  Returns the
    final pump-frame ``(x, y)`` and, with ``record=True``,
    ``(times, xs, ys)`` sampled every ``cfg.record_stride`` steps.
    """
    cfg.check(schedule)
    keys = np.asarray(keys, dtype=np.uint64)
    stream = NormalStream(keys)
    x = np.array(x0, dtype=float, copy=True)
    y = np.array(y0, dtype=float, copy=True) if two_d else None
    theta = schedule.theta_p(0.0)
    if two_d and theta != 0.0:
        x, y = _rotate(x, y, theta)
    elif not two_d and len(schedule.phase) > 1:
        raise ValidationError("phase changes need two_d=True", "schedule.phase")

    bias = schedule.bias
    amp0 = bias.amplitude if amplitudes is None else np.asarray(amplitudes, dtype=float)
    on = None if np.all(np.asarray(amp0) == 0) else amp0
    leak = None
    if leaks is not None:
        leak = np.asarray(leaks, dtype=float)
    elif bias.extinction_floor > 0 and on is not None:
        leak = bias.extinction_floor * np.sign(amp0)

    g = schedule.saturation
    dt = cfg.dt
    n_steps = cfg.n_steps
    stride = cfg.record_stride
    m = cfg.noise_substeps
    inv_sqrt_m = 1.0 / math.sqrt(m)
    times, xs, ys = [], [], []
    if record:
        times.append(0.0)
        xs.append(x.copy())
        ys.append(y.copy() if two_d else None)

    for n in range(n_steps):
        tau = n * dt
        if two_d:
            th = schedule.theta_p(tau)
            if th != theta:
                x, y = _rotate(x, y, th - theta)
                theta = th
        lam = schedule.lam(tau)
        bx, by = _bias_field(schedule, tau, on, leak)
        if m == 1:
            n1, n2 = stream.pair(n)
        else:
            n1, n2 = stream.pair(n * m)
            for j in range(1, m):
                a, b = stream.pair(n * m + j)
                n1, n2 = n1 + a, n2 + b
            n1, n2 = n1 * inv_sqrt_m, n2 * inv_sqrt_m
        amp = math.sqrt(lam * dt)
        if two_d:
            if g is None:
                dx = (lam - 1.0) * x
                dy = -(lam + 1.0) * y
            else:
                r2 = g * (x * x + y * y)
                dx = (lam - 1.0 - r2) * x
                dy = (-(lam + 1.0) - r2) * y
            if bx is not None:
                dx += bx
            if by is not None:
                dy += by
            x = x + dx * dt + amp * n1
            y = y + dy * dt + amp * n2
            bad = ~((np.abs(x) <= DIVERGENCE_LIMIT) & (np.abs(y) <= DIVERGENCE_LIMIT))
        else:
            if g is None:
                dx = (lam - 1.0) * x
            else:
                dx = (lam - 1.0 - g * x * x) * x
            if bx is not None:
                dx += bx
            x = x + dx * dt + amp * n1
            bad = ~(np.abs(x) <= DIVERGENCE_LIMIT)
        if bad.any():
            raise DivergenceError((n + 1) * dt, index_offset + int(np.argmax(bad)))
        if record and (n + 1) % stride == 0:
            times.append((n + 1) * dt)
            xs.append(x.copy())
            ys.append(y.copy() if two_d else None)

    if record:
        return x, y, (np.array(times), xs, ys)
    return x, y


def integrate(
    initial: PhasePoint,
    schedule: Schedule,
    cfg: IntegratorConfig,
    seed: int,
    two_d: bool = True,
) -> Trajectory:
    """Integrate one trajectory; ``seed`` is its 64-bit noise key."""
    x, y, (times, xs, ys) = integrate_batch(
        [initial.re], [initial.im], schedule, cfg, [seed], two_d=two_d, record=True
    )
    xs = np.array([v[0] for v in xs])
    ys = np.array([v[0] for v in ys]) if two_d else None
    traj = Trajectory(times=times, x=xs, y=ys, seed=int(seed), outcome=0)
    traj.outcome = classify(traj)
    return traj


def classify(traj: Trajectory) -> int:
    """1 for the phase-0 steady state (final X >= 0), else 0."""
    return int(traj.x[-1] >= 0.0)


def _run_chunk(args):
    sampler, schedule, cfg, base_seed, start, stop, two_d, record = args
    keys = trajectory_keys(base_seed, start, stop)
    init = sampler.sample(keys)
    res = integrate_batch(
        init[:, 0], init[:, 1], schedule, cfg, keys,
        two_d=two_d, record=record, index_offset=start,
    )
    return keys, res


def run_ensemble(
    initial_sampler,
    schedule: Schedule,
    cfg: IntegratorConfig,
    n: int,
    base_seed: int,
    *,
    workers: int = 1,
    chunk_size: int = 8192,
    two_d: bool = True,
    record: bool = False,
) -> Ensemble:
    """Run ``n`` trajectories; member ``i`` uses key ``counter_mix(base_seed, i)``.

    ``initial_sampler`` needs a ``sample(keys)`` method returning one
    lab-frame initial point per trajectory key (a PhasePoint is accepted
    as a point mass).  Results do not depend on ``workers``
    or ``chunk_size``.
    """
    if n < 1:
        raise ValidationError(f"must be >= 1, got {n}", "ensemble.n")
    if base_seed is None:
        raise ValidationError("an explicit seed is required", "seed")
    if isinstance(initial_sampler, PhasePoint):
        initial_sampler = PointSampler(initial_sampler.re, initial_sampler.im)
    cfg.check(schedule)
    bounds = [(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]
    jobs = [
        (initial_sampler, schedule, cfg, base_seed, a, b, two_d, record) for a, b in bounds
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk, jobs))
    else:
        results = [_run_chunk(j) for j in jobs]

    seeds = np.concatenate([r[0] for r in results])
    fx = np.concatenate([r[1][0] for r in results])
    fy = np.concatenate([r[1][1] for r in results]) if two_d else None
    outcomes = (fx >= 0.0).astype(np.uint8)
    trajectories = []
    if record:
        for keys, (_, _, (times, xs, ys)) in results:
            for j, key in enumerate(keys):
                tx = np.array([v[j] for v in xs])
                ty = np.array([v[j] for v in ys]) if two_d else None
                trajectories.append(
                    Trajectory(times, tx, ty, int(key), int(tx[-1] >= 0.0))
                )
    return Ensemble(
        outcomes=outcomes,
        seeds=seeds,
        final_x=fx,
        final_y=fy,
        base_seed=base_seed,
        trajectories=trajectories,
    )


def default_horizon(lam: float, tau0: float = 0.0, saturation=None) -> float:
    """Measurement horizon long enough for the steady-state sign to settle."""
    if saturation is not None:
        return 20.0
    return tau0 + 6.0 / (lam - 1.0)
