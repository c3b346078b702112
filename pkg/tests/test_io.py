import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dopo_tomography import io
from dopo_tomography.model import ValidationError
from dopo_tomography.protocol import BiasProbabilityCurve
from dopo_tomography.reconstruct import MarginalQ, forward_sinogram, gaussian_grid, inverse_radon

VALID = {
    "seed": 123,
    "preparation": {"kind": "analytic_gaussian", "var_major": 1.0, "var_minor": 0.25},
    "measurement": {"lambda": 2.0},
    "sweep": {"angles": 4, "n_per_point": 200, "n_bias": 11},
    "integrator": {"dt": 0.005},
}

finite = st.floats(-1e6, 1e6, allow_nan=False)


@st.composite
def curves(draw):
    m = draw(st.integers(1, 12))
    b = sorted(set(draw(st.lists(finite, min_size=m, max_size=m, unique=True))))
    n = draw(st.lists(st.integers(1, 10**6), min_size=len(b), max_size=len(b)))
    k = [draw(st.integers(0, ni)) for ni in n]
    meta = draw(st.dictionaries(st.text(min_size=1, max_size=8), st.integers() | finite | st.text(max_size=5), max_size=4))
    return BiasProbabilityCurve(
        theta=draw(st.floats(0, 3.1)), tau0=draw(st.floats(0, 5)), lam=draw(st.floats(1.01, 5)),
        b=b, n=n, n_positive=k, meta=meta,
    )


@settings(max_examples=60, deadline=None)
@given(curves())
def test_curve_round_trip(curve):
    text = io.emit_curve(curve)
    assert io.parse_curve(text) == curve
    assert io.emit_curve(io.parse_curve(text)) == text


def test_curve_header_fields():
    c = BiasProbabilityCurve(0.5, 0.25, 2.0, [0.0, 1.0], [100, 100], [50, 90], {"seed": 7})
    lines = io.emit_curve(c).splitlines()
    head = {l[2:].split("=")[0] for l in lines if l.startswith("#")}
    assert {"theta", "tau0", "lambda", "n", "seed"} <= head
    assert lines[len(head)] == "b,p_hat,n,n_positive,ci_low,ci_high"


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1e3), min_size=2, max_size=40), st.floats(0, 3.1))
def test_marginal_round_trip(dens, theta):
    axis = np.linspace(-3, 3, len(dens))
    m = MarginalQ(theta, axis, np.array(dens), True, 0.1, 1.3, None)
    back = io.parse_marginal(io.emit_marginal(m))
    np.testing.assert_array_equal(back.axis, m.axis)
    np.testing.assert_array_equal(back.density, m.density)
    assert (back.theta, back.center, back.std, back.std_err) == (theta, 0.1, 1.3, None)


def test_sinogram_and_grid_round_trip():
    ax = np.linspace(-4, 4, 48)
    sino = forward_sinogram(gaussian_grid(ax, cov=np.diag([1.0, 0.4])), np.arange(6) * math.pi / 6)
    back = io.parse_sinogram(io.emit_sinogram(sino))
    np.testing.assert_array_equal(back.matrix(), sino.matrix())
    np.testing.assert_array_equal(back.angles, sino.angles)
    q = inverse_radon(sino)
    qb = io.parse_qgrid(io.emit_qgrid(q))
    np.testing.assert_array_equal(qb.values, q.values)
    np.testing.assert_array_equal(qb.axis, q.axis)
    assert qb.negative_fraction == q.negative_fraction
    assert "# cell=" in io.emit_qgrid(q)


def test_parse_rejects_wrong_format():
    ax = np.linspace(-1, 1, 5)
    text = io.emit_marginal(MarginalQ(0.0, ax, np.ones(5)))
    with pytest.raises(ValidationError):
        io.parse_curve(text)


def test_resolve_requires_seed():
    cfg = copy.deepcopy(VALID)
    del cfg["seed"]
    with pytest.raises(ValidationError, match="seed"):
        io.resolve_config(cfg)
    assert io.resolve_config(cfg, seed=5)["seed"] == 5


def test_preset_expansion():
    plan = io.plan_from_config(io.resolve_config(preset="fig2", seed=1))
    assert len(plan.theta_grid) == 12 and plan.n_per_point == 1000
    assert plan.prep.kind == "sde_relaxation" and plan.prep.lambda_prep == 0.8
    plan = io.plan_from_config(io.resolve_config(preset="fig3", seed=1))
    assert plan.tau0_grid == (0.0, 0.5, 1.0) and plan.n_per_point == 10_000


MUTATIONS = [
    ("seed", -1, "seed"),
    ("seed", "abc", "seed"),
    ("bogus", 1, "bogus"),
    ("sweep.bogus", 1, "sweep.bogus"),
    ("sweep.n_per_point", 5, "sweep.n_per_point"),
    ("sweep.angles", 0, "sweep.angles"),
    ("sweep.theta_grid", [], "sweep.theta_grid"),
    ("sweep.theta_grid", [0.0, 4.0], "sweep.theta_grid"),
    ("sweep.tau0_grid", [-1.0], "sweep.tau0_grid"),
    ("sweep.b_grid", [1.0, 0.0], "sweep.b_grid"),
    ("measurement.lambda", 1.0, "lambda"),
    ("measurement.leak_fraction", 2.0, "leak_fraction"),
    ("measurement.saturation", -0.1, "saturation"),
    ("integrator.dt", 0.2, "dt"),
    ("integrator.dt", -0.1, "dt"),
    ("preparation.kind", "thermal", "preparation.kind"),
    ("preparation.var_minor", -1.0, "preparation.var_minor"),
    ("preparation.var_major", 0.1, "preparation.var_major"),
    ("preparation", {"kind": "sde_relaxation", "lambda_prep": 1.0}, "preparation.lambda_prep"),
    ("preparation", {"kind": "sde_relaxation", "lambda_prep": 0.5, "relax_time": 0}, "preparation.relax_time"),
]


def _set(cfg, dotted, value):
    *parents, leaf = dotted.split(".")
    node = cfg
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


@settings(max_examples=len(MUTATIONS) * 2, deadline=None)
@given(st.sampled_from(MUTATIONS), st.sampled_from([None, "fig2", "fig3"]))
def test_config_mutations_rejected(mutation, preset):
    path, value, expected = mutation
    cfg = copy.deepcopy(VALID)
    if preset and path.startswith("sweep.angles"):
        cfg["sweep"].pop("theta_grid", None)
    if path.startswith("sweep.theta_grid"):
        cfg["sweep"].pop("angles")
    _set(cfg, path, value)
    with pytest.raises(ValidationError) as exc:
        resolved = io.resolve_config(cfg, preset=preset if not path.startswith("sweep.") else None)
        io.plan_from_config(resolved)
    assert expected in (exc.value.path or "") or expected in str(exc.value)


def test_load_config_yaml(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text("seed: 5\nsweep:\n  angles: 3\n")
    cfg = io.resolve_config(io.load_config(p))
    assert io.plan_from_config(cfg).theta_grid == (0.0, math.pi / 3, 2 * math.pi / 3)


def test_write_atomic_and_manifest(tmp_path):
    f = tmp_path / "a.csv"
    io.write_atomic(f, "x\n1\n")
    man = io.write_manifest(tmp_path, {"seed": 1}, [f], "t0", "t1")
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == man
    assert man["files"]["a.csv"] == io.sha256_file(f)
    assert not [p for p in tmp_path.iterdir() if p.name.endswith(".tmp")]
