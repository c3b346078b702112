"""Command-line entry point: ``dopo-tomo {oracle,sweep,reconstruct,dynamics}``.

Errors are reported as one JSON line on stderr, prefixed ``error:``, and a
nonzero exit code (2 for invalid input, 1 for runtime failures).
"""

from __future__ import annotations

import argparse
import json
import math
import shutil
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from dopo_tomography import __version__
from dopo_tomography import io
from dopo_tomography.model import (
    ValidationError,
    displacement,
    f_variance,
    probability_curve,
)
from dopo_tomography.protocol import sweep_bias
from dopo_tomography.reconstruct import (
    AxisMismatch,
    IllConditioned,
    Sinogram,
    build_sinogram,
    contour_ellipse,
    fit_erf,
    gaussian_marginal,
    inverse_radon,
    squeezing_db,
)
from dopo_tomography.sde import DivergenceError

EXIT_INVALID = 2
EXIT_RUNTIME = 1


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ValidationError(f"bad number list {text!r}", "args") from exc


def _config_from_args(args):
    cfg = io.load_config(args.config) if args.config else None
    return io.resolve_config(cfg, args.preset, args.seed, args.out)


class _Output:
    """Tracks files written in one run and removes them if the run fails."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.created_dir = not self.dir.exists()
        self.files = []

    def write(self, name, text):
        path = self.dir / name
        io.write_atomic(path, text)
        self.files.append(path)
        return path

    def discard(self):
        for f in self.files:
            f.unlink(missing_ok=True)
        man = self.dir / "manifest.json"
        man.unlink(missing_ok=True)
        if self.created_dir and self.dir.exists():
            shutil.rmtree(self.dir, ignore_errors=True)


def _curve_job(args):
    plan, i, j = args
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        curve = sweep_bias(plan, i, j)
    return i, j, curve, [str(w.message) for w in caught]


def _run_curves(plan, pairs, workers):
    jobs = [(plan, i, j) for i, j in pairs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_curve_job, jobs))
    else:
        results = [_curve_job(j) for j in jobs]
    for *_, msgs in results:
        for m in msgs:
            print(f"warning: {m}", file=sys.stderr)
    return results


def _out_dir(cfg):
    if not cfg.get("output"):
        raise ValidationError("an output directory is required (--out)", "output")
    return Path(cfg["output"])


# -- subcommands -------------------------------------------------------------


def cmd_oracle(args):
    b0 = _floats(args.b0)
    tau0 = _floats(args.tau0)
    lams = _floats(args.lam)
    lines = ["b0,tau0,lambda,p,displacement,f_variance"]
    for lam in lams:
        for t in tau0:
            for b in b0:
                p = float(probability_curve(b, lam, t))
                lines.append(
                    f"{b!r},{t!r},{lam!r},{p!r},{float(displacement(b, lam))!r},"
                    f"{float(f_variance(t, lam))!r}"
                )
    text = "\n".join(lines) + "\n"
    if args.out:
        io.write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_sweep(args):
    cfg = _config_from_args(args)
    plan = io.plan_from_config(cfg)
    out = _Output(_out_dir(cfg))
    started = _now()
    try:
        pairs = [(i, j) for j in range(len(plan.tau0_grid)) for i in range(len(plan.theta_grid))]
        for i, j, curve, _ in _run_curves(plan, pairs, args.workers):
            out.write(f"curve_t{i:03d}_d{j:03d}.csv", io.emit_curve(curve))
        io.write_manifest(out.dir, cfg, out.files, started, _now())
    except BaseException:
        out.discard()
        raise
    print(json.dumps({"status": "ok", "out": str(out.dir), "curves": len(out.files)}))
    return 0


def _load_curves(path):
    """Parse curve files and check that they form one consistent set."""
    path = Path(path)
    if not path.exists():
        raise ValidationError("input does not exist", str(path))
    files = sorted(path.glob("curve_*.csv")) if path.is_dir() else [path]
    if not files:
        raise ValidationError("no curve files found", str(path))
    curves = [io.parse_curve(f.read_text(), f) for f in files]
    ref, ref_file = curves[0], files[0].name
    seen = {}
    for f, c in zip(files, curves):
        if c.lam != ref.lam or c.tau0 != ref.tau0:
            raise AxisMismatch(
                f"lambda/tau0 ({c.lam}, {c.tau0}) differ from {ref_file} ({ref.lam}, {ref.tau0})",
                f.name,
            )
        theta = c.theta % math.pi
        if theta in seen:
            raise AxisMismatch(f"angle {c.theta} duplicates {seen[theta]}", f.name)
        seen[theta] = f.name
    return curves


def cmd_reconstruct(args):
    curves = _load_curves(args.input)
    lam = curves[0].lam
    sino = build_sinogram(curves, mode=args.mode, n_axis=args.n_axis)
    if args.vacuum:
        vac_curves = _load_curves(args.vacuum)
        vac = build_sinogram(vac_curves, mode="parametric", axis=sino.axis)
        vac_source = str(args.vacuum)
    else:
        # point-mass vacuum: the measurement alone contributes lam / (2 (lam-1))
        var = lam / (2 * (lam - 1))
        vac = Sinogram(
            [gaussian_marginal(m.theta, sino.axis, cov=np.eye(2) * var) for m in sino.marginals],
            "analytic vacuum",
        )
        vac_source = "analytic"
    if args.mode != "parametric":
        # variances from the fitted widths are far less noisy
        sq_state = build_sinogram(curves, mode="parametric", axis=sino.axis)
    else:
        sq_state = sino
    sq = squeezing_db(sq_state, vac)
    q = inverse_radon(sino, grid_size=args.grid_size, angular_upsample=args.upsample)
    ell = contour_ellipse(q)

    out = _Output(Path(args.out))
    started = _now()
    try:
        for k, m in enumerate(sino.marginals):
            out.write(f"marginal_{k:03d}.csv", io.emit_marginal(m))
        out.write("sinogram.csv", io.emit_sinogram(sino))
        out.write("qgrid.csv", io.emit_qgrid(q))
        summary = {
            "angle_min": sq.angle_min,
            "db_min": sq.db_min,
            "db_max": sq.db_max,
            "uncertainty": sq.uncertainty,
            "negative_fraction": q.negative_fraction,
            "ellipse_semi_major": ell.semi_major,
            "ellipse_semi_minor": ell.semi_minor,
            "ellipse_minor_angle": ell.minor_angle,
            "vacuum": vac_source,
            "mode": args.mode,
        }
        lines = [f"# {k}={json.dumps(v)}" for k, v in summary.items()]
        lines.append("theta,var_state,var_vacuum,db,db_err")
        for row in zip(sq.angles, sq.var_state, sq.var_vacuum, sq.db, sq.db_err):
            lines.append(",".join(repr(float(v)) for v in row))
        out.write("metrics.csv", "\n".join(lines) + "\n")
        io.write_manifest(
            out.dir, {"input": str(args.input), **vars_snapshot(args)}, out.files, started, _now()
        )
    except BaseException:
        out.discard()
        raise
    print(json.dumps({"status": "ok", **summary}))
    return 0


def vars_snapshot(args):
    return {k: v for k, v in vars(args).items() if k != "func" and not callable(v)}


def growth_rate(tau0, sigma, sigma_err):
    """Weighted least-squares slope of ``log sigma`` against ``tau0``."""
    tau0 = np.asarray(tau0, dtype=float)
    y = np.log(sigma)
    w = (np.asarray(sigma, dtype=float) / np.asarray(sigma_err, dtype=float)) ** 2
    A = np.column_stack([np.ones_like(tau0), tau0])
    cov = np.linalg.inv(A.T @ (A * w[:, None]))
    coef = cov @ (A.T @ (w * y))
    return float(coef[1]), float(math.sqrt(cov[1, 1]))


def cmd_dynamics(args):
    cfg = _config_from_args(args)
    plan = io.plan_from_config(cfg)
    if len(plan.tau0_grid) < 2:
        raise ValidationError("need at least two delays", "sweep.tau0_grid")
    if plan.saturation:
        print(
            "warning: saturation > 0; sigma_b growth deviates from exp((lambda-1) tau0)",
            file=sys.stderr,
        )
    out = _Output(_out_dir(cfg))
    started = _now()
    try:
        pairs = [(i, j) for i in range(len(plan.theta_grid)) for j in range(len(plan.tau0_grid))]
        results = _run_curves(plan, pairs, args.workers)
        rows = ["theta,tau0,center,sigma_b,sigma_b_err,ci_low,ci_high"]
        rates = {}
        for i, theta in enumerate(plan.theta_grid):
            sig, err, taus = [], [], []
            for ii, j, curve, _ in results:
                if ii != i:
                    continue
                out.write(f"curve_t{i:03d}_d{j:03d}.csv", io.emit_curve(curve))
                fit = fit_erf(curve)
                lo, hi = fit.width_ci()
                rows.append(
                    ",".join(
                        repr(float(v))
                        for v in (theta, curve.tau0, fit.center, fit.width, fit.width_err, lo, hi)
                    )
                )
                sig.append(fit.width)
                err.append(fit.width_err)
                taus.append(curve.tau0)
            rates[repr(theta)] = growth_rate(taus, sig, err)
        lam = plan.lambda_meas
        header = [
            f"# expected_rate={json.dumps(lam - 1)}",
            f"# growth_rate={json.dumps({k: v[0] for k, v in rates.items()})}",
            f"# growth_rate_err={json.dumps({k: v[1] for k, v in rates.items()})}",
        ]
        out.write("dynamics.csv", "\n".join(header + rows) + "\n")
        io.write_manifest(out.dir, cfg, out.files, started, _now())
    except BaseException:
        out.discard()
        raise
    print(
        json.dumps(
            {
                "status": "ok",
                "expected_rate": lam - 1,
                "growth_rate": {k: v[0] for k, v in rates.items()},
                "growth_rate_err": {k: v[1] for k, v in rates.items()},
            }
        )
    )
    return 0


# -- parser ------------------------------------------------------------------


def _add_run_flags(p):
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--preset", choices=sorted(io.PRESET_CONFIGS))
    p.add_argument("--seed", type=int, help="64-bit base seed (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--workers", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="dopo-tomo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("oracle", help="closed-form probability table")
    p.add_argument("--b0", default="-1,-0.5,0,0.5,1", help="comma-separated bias amplitudes")
    p.add_argument("--tau0", default="0", help="comma-separated injection delays")
    p.add_argument("--lambda", dest="lam", default="2", help="comma-separated pump strengths")
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("sweep", help="simulate bias-probability curves")
    _add_run_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reconstruct", help="marginals, Q grid and squeezing from curves")
    p.add_argument("input", help="directory of curve files (or one file)")
    p.add_argument("--out", required=True)
    p.add_argument("--vacuum", help="directory of measured vacuum curves")
    p.add_argument("--mode", choices=("parametric", "nonparametric"), default="parametric")
    p.add_argument("--n-axis", type=int, default=128)
    p.add_argument("--grid-size", type=int)
    p.add_argument("--upsample", type=int, default=1, help="angular upsampling factor")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("dynamics", help="transition width against injection delay")
    _add_run_flags(p)
    p.set_defaults(func=cmd_dynamics)
    return parser


def _fail(kind, message, path=None, code=EXIT_RUNTIME):
    rec = {"error": kind, "message": message}
    if path:
        rec["path"] = path
    print("error: " + json.dumps(rec), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "workers", 1) < 1:
        return _fail("ValidationError", "must be >= 1", "workers", EXIT_INVALID)
    try:
        return args.func(args)
    except ValidationError as exc:
        return _fail(type(exc).__name__, str(exc), exc.path, EXIT_INVALID)
    except IllConditioned as exc:
        return _fail("IllConditioned", str(exc))
    except DivergenceError as exc:
        return _fail("DivergenceError", str(exc))
    except (OSError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
