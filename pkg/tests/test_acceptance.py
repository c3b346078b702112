"""Acceptance criteria.  Each test prints one ``criterion N: PASS|FAIL`` line."""

import json
import math
import time

import numpy as np

from dopo_tomography import cli, io
from dopo_tomography.model import BiasSpec, PhasePoint, displacement, probability_curve
from dopo_tomography.protocol import SweepPlan, sweep_bias
from dopo_tomography.reconstruct import forward_sinogram, gaussian_grid, inverse_radon
from dopo_tomography.sde import IntegratorConfig, Schedule, run_ensemble

SEED = 20240611


def report(capsys, number, ok, detail, elapsed, budget):
    ok = ok and elapsed < budget
    with capsys.disabled():
        print(
            f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} | {detail} | "
            f"{elapsed:.1f}s (budget {budget:.0f}s)"
        )
    assert ok, detail


def central_l2(rec, ref, radius):
    xx, yy = np.meshgrid(ref.axis, ref.axis)
    m = xx**2 + yy**2 <= radius**2
    return float(np.linalg.norm((rec.values - ref.values)[m]) / np.linalg.norm(ref.values[m]))


def _criterion1_curve(seed=SEED):
    plan = SweepPlan(b_grid=(0.0,), n_per_point=10_000, lambda_meas=2.0, seed=seed)
    return sweep_bias(plan)


def _criterion5_grid():
    ax = np.linspace(-4.8, 4.8, 128)  # +-4 sigma of the wide axis
    c = np.diag([1.2**2, 0.6**2])
    q = gaussian_grid(ax, cov=c)
    rec = inverse_radon(forward_sinogram(q, np.arange(12) * math.pi / 12))
    return q, rec


def test_criterion_1_unbiased_symmetry(capsys):
    t0 = time.perf_counter()
    curve = _criterion1_curve()
    p = float(curve.p_hat[0])
    ok = abs(p - 0.5) <= 0.015
    report(capsys, 1, ok, f"p={p:.4f} (target 0.5 +- 0.015, n=10^4)", time.perf_counter() - t0, 60)


def test_criterion_2_erf_oracle_grid(capsys):
    t0 = time.perf_counter()
    b = tuple(np.linspace(-2, 2, 11))
    n = 10_000
    misses, total, worst = 0, 0, 0.0
    for i, lam in enumerate((1.5, 2.0, 3.0)):
        plan = SweepPlan(
            b_grid=b, tau0_grid=(0.0, 0.5), n_per_point=n, lambda_meas=lam, seed=SEED + i
        )
        for j, tau0 in enumerate(plan.tau0_grid):
            curve = sweep_bias(plan, 0, j)
            ref = probability_curve(np.array(b), lam, tau0)
            sig = np.sqrt(np.maximum(ref * (1 - ref), 1.0 / n) / n)
            z = np.abs(curve.p_hat - ref) / sig
            misses += int(np.sum(z > 3))
            total += z.size
            worst = max(worst, float(z.max()))
    ok = total == 66 and misses <= 2
    report(
        capsys, 2, ok, f"{misses}/{total} points beyond 3 sigma (max z={worst:.2f}, allowed 2)",
        time.perf_counter() - t0, 600,
    )


def test_criterion_3_displacement_equivalence(capsys):
    t0 = time.perf_counter()
    lam, n = 2.0, 10_000
    worst = 0.0
    for j, b0 in enumerate((-1.0, -0.5, 0.0, 0.5, 1.0)):
        biased = run_ensemble(
            PhasePoint(0, 0), Schedule.constant(lam, BiasSpec(b0)), IntegratorConfig(),
            n, base_seed=SEED + j, two_d=False,
        )
        shifted = run_ensemble(
            PhasePoint(displacement(b0, lam), 0), Schedule.constant(lam), IntegratorConfig(),
            n, base_seed=SEED + 100 + j, two_d=False,
        )
        p = 0.5 * (biased.p_hat + shifted.p_hat)
        sig = math.sqrt(max(2 * p * (1 - p), 1.0 / n) / n)
        worst = max(worst, abs(biased.p_hat - shifted.p_hat) / sig)
    report(
        capsys, 3, worst <= 3, f"max |dp|/sigma={worst:.2f} over 5 biases (limit 3)",
        time.perf_counter() - t0, 120,
    )


def _run_fig3(tmp_path, name):
    out = tmp_path / name
    code = cli.main(["dynamics", "--preset", "fig3", "--seed", str(SEED), "--out", str(out)])
    return code, out


def test_criterion_4_delay_scaling(capsys, tmp_path):
    t0 = time.perf_counter()
    code, out = _run_fig3(tmp_path, "fig3")
    table = (out / "dynamics.csv").read_text() if code == 0 else ""
    head = {
        l[2:].split("=", 1)[0]: json.loads(l.split("=", 1)[1])
        for l in table.splitlines()
        if l.startswith("#")
    }
    slope = head.get("growth_rate", {}).get(repr(0.0), float("nan"))
    err = head.get("growth_rate_err", {}).get(repr(0.0), float("nan"))
    ok = code == 0 and abs(slope - 1.0) <= 0.05
    report(
        capsys, 4, ok, f"slope={slope:.4f} +- {err:.4f} (target 1.00 +- 0.05)",
        time.perf_counter() - t0, 600,
    )


def test_criterion_5_radon_round_trip(capsys):
    t0 = time.perf_counter()
    q, rec = _criterion5_grid()
    l2 = central_l2(rec, q, 3 * 0.6)
    l2_wide = central_l2(rec, q, 3 * 1.2)
    ok = l2 < 0.05 and rec.negative_fraction < 0.03
    report(
        capsys, 5, ok,
        f"L2={l2:.4f} (central 3 sigma_min), {l2_wide:.4f} (3 sigma_max), "
        f"clipped={rec.negative_fraction:.4f}",
        time.perf_counter() - t0, 60,
    )


def test_criterion_6_squeezed_vacuum_tomography(capsys, tmp_path):
    t0 = time.perf_counter()
    curves, rec = tmp_path / "fig2", tmp_path / "rec"
    code = cli.main(["sweep", "--preset", "fig2", "--seed", str(SEED), "--out", str(curves)])
    n_files = len(list(curves.glob("curve_*.csv")))
    code2 = cli.main(["reconstruct", str(curves), "--out", str(rec)])
    text = (rec / "metrics.csv").read_text()
    summary = {
        l[2:].split("=", 1)[0]: json.loads(l.split("=", 1)[1])
        for l in text.splitlines()
        if l.startswith("#")
    }
    rows = np.array(
        [[float(v) for v in l.split(",")] for l in text.splitlines() if l and l[0].isdigit()]
    )
    var = dict(zip(np.round(rows[:, 0], 9), rows[:, 1]))
    ratio = var[0.0] / var[round(math.pi / 2, 9)]
    # measured variance = prepared variance + measurement vacuum lambda / (2 (lambda - 1))
    lp, lam = 0.8, 2.0
    vac = lam / (2 * (lam - 1))
    oracle = (vac + lp / (2 * (1 - lp))) / (vac + lp / (2 * (1 + lp)))
    minor = math.degrees(summary["ellipse_minor_angle"])
    ok_a = abs(minor - 90) <= 15 and summary["ellipse_semi_major"] > summary["ellipse_semi_minor"]
    ok_b = abs(ratio / oracle - 1) <= 0.2
    ok_c = summary["db_min"] <= 3.01 and summary["db_max"] <= 3.01
    ok = code == 0 and code2 == 0 and n_files == 12 and ok_a and ok_b and ok_c
    report(
        capsys, 6, ok,
        f"(a) minor axis {minor:.1f} deg, semi-axes {summary['ellipse_semi_major']:.3f}/"
        f"{summary['ellipse_semi_minor']:.3f}; (b) ratio {ratio:.3f} vs oracle {oracle:.3f}; "
        f"(c) dB_min {summary['db_min']:.2f}, dB_max {summary['db_max']:.2f} <= 3.01; "
        f"clipped {summary['negative_fraction']:.4f}; {n_files} curve files",
        time.perf_counter() - t0, 1800,
    )


def test_criterion_7_bifurcation(capsys):
    t0 = time.perf_counter()
    n = 10_000
    ens = run_ensemble(
        PhasePoint(0, 0), Schedule.constant(2.0, saturation=0.01),
        IntegratorConfig(dt=0.005, tau_end=20.0), n, base_seed=SEED,
    )
    mean_abs = float(np.abs(ens.final_x).mean())
    split = ens.p_hat
    ok = abs(mean_abs / 10 - 1) <= 0.1 and abs(split - 0.5) <= 3 * math.sqrt(0.25 / n)
    report(
        capsys, 7, ok, f"mean |X|={mean_abs:.3f} (target 10 +- 10%), split={split:.4f} (0.5 +- 0.015)",
        time.perf_counter() - t0, 300,
    )


def test_criterion_8_determinism(capsys, tmp_path):
    t0 = time.perf_counter()
    same = []
    same.append(io.emit_curve(_criterion1_curve()) == io.emit_curve(_criterion1_curve()))
    same.append(io.emit_qgrid(_criterion5_grid()[1]) == io.emit_qgrid(_criterion5_grid()[1]))
    _, a = _run_fig3(tmp_path, "a")
    _, b = _run_fig3(tmp_path, "b")
    names = sorted(p.name for p in a.iterdir() if p.name != "manifest.json")
    for name in names:
        same.append((a / name).read_bytes() == (b / name).read_bytes())
    ma = json.loads((a / "manifest.json").read_text())["files"]
    mb = json.loads((b / "manifest.json").read_text())["files"]
    same.append(ma == mb)
    ok = all(same) and len(names) == 4
    report(
        capsys, 8, ok, f"{sum(same)}/{len(same)} exports byte-identical across reruns",
        time.perf_counter() - t0, 1200,
    )
