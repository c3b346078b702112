"""Run configuration, presets, and the delimited-text file formats.

Every file is comma-separated text preceded by ``# key=value`` header
lines.  Floats are written with ``repr`` so ``parse(emit(x)) == x``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np
import yaml

from dopo_tomography.model import GaussianStateSpec, PhasePoint, ValidationError
from dopo_tomography.protocol import BiasProbabilityCurve, PreparationSpec, SweepPlan
from dopo_tomography.reconstruct import MarginalQ, QGrid, Sinogram

__all__ = [
    "PRESET_CONFIGS",
    "load_config",
    "resolve_config",
    "plan_from_config",
    "emit_curve",
    "parse_curve",
    "emit_marginal",
    "parse_marginal",
    "emit_sinogram",
    "parse_sinogram",
    "emit_qgrid",
    "parse_qgrid",
    "write_atomic",
    "sha256_file",
    "write_manifest",
]

PRESET_CONFIGS = {
    "fig2": {
        "preparation": {"kind": "sde_relaxation", "lambda_prep": 0.8, "relax_time": 20.0},
        "measurement": {"lambda": 2.0},
        "sweep": {"angles": 12, "tau0_grid": [0.0], "n_per_point": 1000},
        "integrator": {"dt": 0.005},
    },
    "fig3": {
        "preparation": {"kind": "vacuum_point"},
        "measurement": {"lambda": 2.0, "amplify_phase": 0.0},
        "sweep": {"theta_grid": [0.0], "tau0_grid": [0.0, 0.5, 1.0], "n_per_point": 10000},
        "integrator": {"dt": 0.005},
    },
}

_SCHEMA = {
    "seed": None,
    "output": None,
    "preparation": {"kind", "lambda_prep", "relax_time", "dt", "mean", "var_major", "var_minor", "axis_angle"},
    "measurement": {"lambda", "saturation", "rise", "amplify_phase", "leak_fraction"},
    "sweep": {"angles", "theta_grid", "tau0_grid", "b_grid", "n_bias", "span", "n_per_point"},
    "integrator": {"dt"},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path) -> dict:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValidationError("top level must be a mapping", "config")
    return data


def resolve_config(config=None, preset=None, seed=None, output=None) -> dict:
    """Combine a preset, a config mapping and CLI overrides (in that order)."""
    base = {}
    if preset is not None:
        if preset not in PRESET_CONFIGS:
            raise ValidationError(f"unknown preset {preset!r}", "preset")
        base = copy.deepcopy(PRESET_CONFIGS[preset])
        user_sweep = (config or {}).get("sweep")
        if isinstance(user_sweep, dict) and {"angles", "theta_grid"} & set(user_sweep):
            # an angle spec in the config replaces the preset's
            base["sweep"].pop("angles", None)
            base["sweep"].pop("theta_grid", None)
    cfg = _merge(base, config)
    if seed is not None:
        cfg["seed"] = seed
    if output is not None:
        cfg["output"] = str(output)
    _check_schema(cfg)
    return cfg


def _check_schema(cfg):
    for key, value in cfg.items():
        if key not in _SCHEMA:
            raise ValidationError("unknown field", key)
        allowed = _SCHEMA[key]
        if allowed is not None:
            if not isinstance(value, dict):
                raise ValidationError("must be a mapping", key)
            for sub in value:
                if sub not in allowed:
                    raise ValidationError("unknown field", f"{key}.{sub}")
    seed = cfg.get("seed")
    if seed is None:
        raise ValidationError("an explicit 64-bit seed is required", "seed")
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ValidationError("must be an integer in [0, 2^64)", "seed")


def _prep_from(section) -> PreparationSpec:
    kind = section.get("kind", "vacuum_point")
    if kind == "analytic_gaussian":
        mean = section.get("mean", [0.0, 0.0])
        if not (isinstance(mean, (list, tuple)) and len(mean) == 2):
            raise ValidationError("must be [re, im]", "preparation.mean")
        try:
            g = GaussianStateSpec(
                mean=PhasePoint(float(mean[0]), float(mean[1])),
                var_major=float(section.get("var_major", 0.5)),
                var_minor=float(section.get("var_minor", 0.5)),
                axis_angle=float(section.get("axis_angle", 0.0)),
            )
        except ValidationError as exc:
            raise ValidationError(str(exc).split(": ", 1)[-1], "preparation." + (exc.path or "").split(".")[-1]) from exc
        return PreparationSpec.analytic(g)
    if kind == "sde_relaxation":
        return PreparationSpec.relaxation(
            float(section.get("lambda_prep", 0.8)),
            float(section.get("relax_time", 20.0)),
            float(section.get("dt", 0.005)),
        )
    return PreparationSpec(kind=kind)


def plan_from_config(cfg: dict) -> SweepPlan:
    """Build a validated SweepPlan; errors carry dotted field paths."""
    meas = cfg.get("measurement", {})
    sweep = cfg.get("sweep", {})
    integ = cfg.get("integrator", {})
    if "theta_grid" in sweep and "angles" in sweep:
        raise ValidationError("give either angles or theta_grid", "sweep.angles")
    if "theta_grid" in sweep:
        thetas = [float(t) for t in sweep["theta_grid"]]
    else:
        n_ang = sweep.get("angles", 1)
        if not isinstance(n_ang, int) or n_ang < 1:
            raise ValidationError("must be a positive integer", "sweep.angles")
        thetas = [i * math.pi / n_ang for i in range(n_ang)]
    sat = meas.get("saturation")
    b_grid = sweep.get("b_grid")
    amp = meas.get("amplify_phase")
    return SweepPlan(
        prep=_prep_from(cfg.get("preparation", {})),
        theta_grid=tuple(thetas),
        tau0_grid=tuple(float(t) for t in sweep.get("tau0_grid", [0.0])),
        b_grid=None if b_grid is None else tuple(float(b) for b in b_grid),
        n_per_point=int(sweep.get("n_per_point", 1000)),
        lambda_meas=float(meas.get("lambda", 2.0)),
        seed=cfg["seed"],
        dt=float(integ.get("dt", 0.005)),
        saturation=None if sat is None else float(sat),
        rise=float(meas.get("rise", 0.0)),
        amplify_phase=None if amp is None else float(amp),
        n_bias=int(sweep.get("n_bias", 21)),
        span=float(sweep.get("span", 4.0)),
        leak_fraction=float(meas.get("leak_fraction", 0.0)),
    )


# -- text formats ------------------------------------------------------------


def _header(lines, fields):
    for key, value in fields.items():
        lines.append(f"# {key}={json.dumps(value, sort_keys=True)}")


def _read(text):
    head, rows = {}, []
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            head[key] = json.loads(value)
        else:
            rows.append(line.split(","))
    return head, rows


def _f(x):
    return repr(float(x))


def _expect(head, kind, source):
    if head.get("format") != kind:
        raise ValidationError(f"not a {kind} file", str(source) if source else "format")


def emit_curve(curve: BiasProbabilityCurve) -> str:
    lines = []
    _header(
        lines,
        {
            "format": "curve/1",
            "theta": float(curve.theta),
            "tau0": float(curve.tau0),
            "lambda": float(curve.lam),
            "n": int(curve.n[0]) if curve.n.size else 0,
            "seed": curve.meta.get("seed"),
            "meta": curve.meta,
        },
    )
    lines.append("b,p_hat,n,n_positive,ci_low,ci_high")
    lo, hi = curve.ci
    for b, p, n, k, l, h in zip(curve.b, curve.p_hat, curve.n, curve.n_positive, lo, hi):
        lines.append(f"{_f(b)},{_f(p)},{int(n)},{int(k)},{_f(l)},{_f(h)}")
    return "\n".join(lines) + "\n"


def parse_curve(text: str, source=None) -> BiasProbabilityCurve:
    head, rows = _read(text)
    _expect(head, "curve/1", source)
    body = rows[1:]
    return BiasProbabilityCurve(
        theta=head["theta"],
        tau0=head["tau0"],
        lam=head["lambda"],
        b=[float(r[0]) for r in body],
        n=[int(r[2]) for r in body],
        n_positive=[int(r[3]) for r in body],
        meta=head.get("meta", {}),
    )


def _marginal_fields(m: MarginalQ):
    return {
        "theta": float(m.theta),
        "normalized": bool(m.normalized),
        "center": m.center,
        "std": m.std,
        "std_err": m.std_err,
    }


def emit_marginal(m: MarginalQ) -> str:
    lines = []
    _header(lines, {"format": "marginal/1", **_marginal_fields(m)})
    lines.append("x,density")
    lines.extend(f"{_f(x)},{_f(d)}" for x, d in zip(m.axis, m.density))
    return "\n".join(lines) + "\n"


def parse_marginal(text: str, source=None) -> MarginalQ:
    head, rows = _read(text)
    _expect(head, "marginal/1", source)
    body = rows[1:]
    return MarginalQ(
        theta=head["theta"],
        axis=np.array([float(r[0]) for r in body]),
        density=np.array([float(r[1]) for r in body]),
        normalized=head["normalized"],
        center=head["center"],
        std=head["std"],
        std_err=head["std_err"],
    )


def emit_sinogram(s: Sinogram) -> str:
    lines = []
    _header(
        lines,
        {
            "format": "sinogram/1",
            "source": s.source,
            "marginals": [_marginal_fields(m) for m in s.marginals],
        },
    )
    lines.append(",".join(["x"] + [f"q{i}" for i in range(len(s.marginals))]))
    mat = s.matrix()
    for j, x in enumerate(s.axis):
        lines.append(",".join([_f(x)] + [_f(v) for v in mat[:, j]]))
    return "\n".join(lines) + "\n"


def parse_sinogram(text: str, source=None) -> Sinogram:
    head, rows = _read(text)
    _expect(head, "sinogram/1", source)
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    axis = data[:, 0]
    marginals = [
        MarginalQ(
            theta=f["theta"], axis=axis.copy(), density=data[:, i + 1].copy(),
            normalized=f["normalized"], center=f["center"], std=f["std"], std_err=f["std_err"],
        )
        for i, f in enumerate(head["marginals"])
    ]
    return Sinogram(marginals, head.get("source", ""))


def emit_qgrid(q: QGrid) -> str:
    lines = []
    _header(
        lines,
        {
            "format": "qgrid/1",
            "size": int(q.axis.size),
            "cell": q.cell,
            "axis": [float(a) for a in q.axis],
            "provenance": q.provenance,
            "negative_fraction": float(q.negative_fraction),
        },
    )
    for row in q.values:
        lines.append(",".join(_f(v) for v in row))
    return "\n".join(lines) + "\n"


def parse_qgrid(text: str, source=None) -> QGrid:
    head, rows = _read(text)
    _expect(head, "qgrid/1", source)
    vals = np.array([[float(v) for v in r] for r in rows])
    axis = np.array(head["axis"], dtype=float)
    if vals.shape != (axis.size, axis.size):
        raise ValidationError("grid shape does not match the axis", str(source or "qgrid"))
    return QGrid(vals, axis, head.get("provenance", ""), head.get("negative_fraction", 0.0))


# -- files -------------------------------------------------------------------


def write_atomic(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, config, files, started, finished, extra=None):
    """Write ``manifest.json`` last, with checksums of ``files``."""
    from dopo_tomography import __version__

    out_dir = Path(out_dir)
    manifest = {
        "tool": "dopo_tomography",
        "version": __version__,
        "config": config,
        "started": started,
        "finished": finished,
        "files": {str(Path(f).relative_to(out_dir)): sha256_file(f) for f in files},
    }
    if extra:
        manifest.update(extra)
    write_atomic(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
