from __future__ import annotations

import csv
import math

import numpy as np
import pytest

from defectlab.defects import dislocation_measure, vorticity_measure
from defectlab.energies import FOUR_PI_SQ, ScalingRegime, sd_energy, xy_energy
from defectlab.equivalence import (
    AUDIT_HEADER,
    CALIBRATED_C,
    ModelRun,
    audit_definition,
    calibrate_potential_constant,
    gl_to_xy,
    mesoscale_schedule,
    sd_to_xy,
    strictly_decreasing,
    summarize_audits,
    t_factor,
    write_audit_csv,
    xy_to_gl,
    xy_to_sd,
)
from defectlab.fields import ContinuumField, DisplacementField, SpinField
from defectlab.geometry import DomainGeometry, build_lattice, fem_mesh
from defectlab.solvers import DefectPrescription, gl_minimize, xy_minimize

SQUARE = DomainGeometry.unit_square()
H1 = ScalingRegime(1)
PREF = 1 / 6


def test_schedule_examples():
    big = DomainGeometry.rectangle(0, 0, 4, 4)  # d = 2, so d/4 exceeds 1/e
    dt, lam, delta = mesoscale_schedule(math.exp(-1), H1, big)
    assert dt == pytest.approx(math.exp(-1), rel=1e-15)
    assert lam == pytest.approx(2 / (2 - 2 * dt), rel=1e-15)
    assert delta == pytest.approx(lam * dt, rel=1e-15)
    eps = 2.0**-10
    dt, lam, delta = mesoscale_schedule(eps, H1, SQUARE)
    assert dt == pytest.approx(eps * (10 * math.log(2)) ** 2, rel=1e-14)
    assert lam == pytest.approx(0.5 / (0.5 - 2 * dt), rel=1e-14)
    with pytest.raises(ValueError, match="d/4"):
        mesoscale_schedule(2.0**-4, H1, SQUARE)
    with pytest.raises(ValueError):
        mesoscale_schedule(1.5, H1, SQUARE)


def test_schedule_asymptotics():
    ks = range(10, 320, 10)
    ratios, over, deltas = [], [], []
    for k in ks:
        eps = 2.0**-k
        _, _, delta = mesoscale_schedule(eps, H1, SQUARE)
        ratios.append(math.log(delta) / math.log(eps))
        over.append(delta / eps)
        deltas.append(delta)
    assert all(np.diff(over) > 0) and all(np.diff(deltas) < 0)
    # |log delta| / |log eps| rises toward 1, slowly: 1 - (h+1) ln|log eps| / |log eps|
    assert all(np.diff(ratios) > 0) and all(r <= 1 for r in ratios)
    assert ratios[-1] >= 0.9
    assert t_factor(2.0**-8, 0.05, H1) == 1.0
    assert 0 < t_factor(2.0**-8, 0.05, ScalingRegime(2)) < 1


def test_sd_to_xy_examples(rng):
    lat = build_lattice(SQUARE, 1 / 32)
    ints = DisplacementField(lat, rng.integers(-4, 4, lat.n_sites).astype(float))
    v, audit = sd_to_xy(ints, lat.epsilon)
    assert np.allclose(v.values, [1, 0]) and audit.src_energy == 0 and audit.tgt_energy == 0
    for _ in range(50):
        u = DisplacementField(lat, rng.uniform(-3, 3, lat.n_sites))
        v, audit = sd_to_xy(u, lat.epsilon)
        xy, sd = xy_energy(v).total, FOUR_PI_SQ * sd_energy(u).total
        assert xy - sd <= 1e-12 * max(1, sd)
        assert vorticity_measure(v).same_atoms(dislocation_measure(u))
        assert audit.gap <= 0 and audit.drift == 0 and audit.delta == lat.epsilon


def test_constant_conversions():
    eps = 2.0**-8
    lat = build_lattice(SQUARE, eps)
    v = SpinField.constant(lat, 0.7)
    u, a = xy_to_sd(v, eps, H1, SQUARE, prefactor=PREF)
    assert np.ptp(u.values) == 0 and a.src_energy == 0 and a.tgt_energy == 0 and a.drift == 0
    w, a = xy_to_gl(SpinField.constant(build_lattice(SQUARE, 1 / 16), 0.7), 1 / 16)
    assert np.ptp(w.values, axis=0).max() == 0 and a.src_energy == 0 and a.tgt_energy == pytest.approx(0, abs=1e-20)
    mesh = fem_mesh(SQUARE, eps / 2)
    wc = ContinuumField(mesh, np.tile([0.0, 1.0], (mesh.n_nodes, 1)))
    vc, a = gl_to_xy(wc, eps, H1, SQUARE, prefactor=PREF)
    assert np.allclose(vc.values, [0, 1]) and a.src_energy == 0 and a.tgt_energy == 0 and a.drift == 0


@pytest.fixture(scope="module")
def xy_vortex():
    eps = 2.0**-7
    lat = build_lattice(SQUARE, eps)
    v, _ = xy_minimize(DefectPrescription.snapped(lat, [[0.5, 0.5]], [1]), lat)
    return v


def test_xy_to_sd_vortex(xy_vortex):
    eps = xy_vortex.lattice.epsilon
    u, a = xy_to_sd(xy_vortex, eps, H1, SQUARE, prefactor=PREF)
    # averaging over the shift classes: the best net carries at most eps/delta_hat of the energy
    assert a.extra["net_energy"] <= a.extra["net_bound"] * (1 + 1e-12)
    mu_u, mu_v = dislocation_measure(u), vorticity_measure(xy_vortex)
    assert mu_u.total_mass == mu_v.total_mass == 1
    assert np.linalg.norm(mu_u.points[0] - mu_v.points[0]) <= 2 * a.delta
    assert a.t_eps == 1.0 and a.delta > eps


def test_xy_to_gl_vortex(xy_vortex):
    eps = xy_vortex.lattice.epsilon
    w, a = xy_to_gl(xy_vortex, eps)
    assert a.extra["bound_ok"]
    assert a.tgt_energy <= (1 + a.t_eps) * a.src_energy
    assert a.extra["s_eps"] == pytest.approx(CALIBRATED_C / math.log(1 / eps))
    assert a.drift < 0.1


def test_gl_to_xy_vortex():
    eps = 2.0**-6
    pr = DefectPrescription.snapped(build_lattice(SQUARE, eps), [[0.5, 0.5]], [1])
    w, _ = gl_minimize(pr, SQUARE, eps)
    v, a = gl_to_xy(w, eps, H1, SQUARE, prefactor=PREF)
    assert vorticity_measure(v).total_mass == 1
    assert a.src_energy > 0 and a.tgt_energy > 0 and a.drift < 0.5
    assert 0 < a.shift[0] < a.extra.get("delta_tilde", 1)


def test_calibration_constant():
    c = calibrate_potential_constant()
    assert CALIBRATED_C <= c < CALIBRATED_C + 0.01


def test_audit_definition_identical_and_errors():
    runs = [ModelRun(2.0**-k, 2.0**-k, 1.0 + 1 / k, None) for k in range(4, 9)]
    s = audit_definition(runs, runs)
    assert all(r["gap"] == 0 and r["drift"] == 0 for r in s.rows)
    assert s.gap_ok and s.drift_decreasing
    with pytest.raises(ValueError):
        audit_definition(runs, runs[:-1])
    with pytest.raises(ValueError):
        audit_definition(runs, runs[::-1])


def test_audit_definition_measures():
    src, tgt = [], []
    for k in range(4, 8):
        eps = 2.0**-k
        a = DefectPrescription([[0.5, 0.5]], [1]).measure(SQUARE)
        b = DefectPrescription([[0.5 + eps, 0.5]], [1]).measure(SQUARE)
        src.append(ModelRun(eps, eps, 3.5, a))
        tgt.append(ModelRun(eps, eps, 3.5 - eps, b))
    s = audit_definition(src, tgt)
    assert s.drift_decreasing and s.gap_ok
    assert [r["drift"] for r in s.rows] == pytest.approx([2.0**-k for k in range(4, 8)])


def test_strictly_decreasing():
    assert strictly_decreasing([3, 2, 1])
    assert not strictly_decreasing([3, 3, 1])
    assert strictly_decreasing([0, 0, 0])


def test_audit_csv(tmp_path, rng):
    lat = build_lattice(SQUARE, 1 / 16)
    audits = [sd_to_xy(DisplacementField(lat, rng.uniform(0, 1, lat.n_sites)), 1 / 16)[1] for _ in range(3)]
    path = tmp_path / "audit.csv"
    write_audit_csv(path, audits)
    rows = list(csv.reader(path.open()))
    assert rows[0] == AUDIT_HEADER
    assert ",".join(AUDIT_HEADER) == "eps,delta_eps,h,src_energy,tgt_energy,gap,drift,t_eps,shift_x,shift_y,radial_defect"
    assert all(len(r) == len(AUDIT_HEADER) for r in rows)
    assert summarize_audits(audits).rows[0]["gap"] == audits[0].gap
