from __future__ import annotations

import csv
import math

import numpy as np
import pytest

from defectlab.defects import boundary_winding, discrete_curl, vorticity_measure
from defectlab.energies import FOUR_PI_SQ, gl_energy, xy_energy
from defectlab.geometry import DomainGeometry, build_lattice
from defectlab.solvers import (
    DefectPrescription,
    PrescriptionError,
    dirac_string,
    gl_minimize,
    sd_minimize,
    vortex_ansatz,
    write_trace,
    xy_minimize,
)

SQUARE = DomainGeometry.unit_square()
LAT32 = build_lattice(SQUARE, 1 / 32)


def single(lat, degree=1):
    return DefectPrescription.snapped(lat, [[0.5, 0.5]], [degree])


def dipole(lat):
    return DefectPrescription.snapped(lat, [[0.25, 0.5], [0.75, 0.5]], [1, -1])


def nonincreasing(trace):
    e = [row[1] for row in trace]
    return all(b <= a * (1 + 1e-14) + 1e-15 for a, b in zip(e, e[1:]))


def test_prescription_validation():
    with pytest.raises(ValueError):
        DefectPrescription([[0.5, 0.5]], [2])
    with pytest.raises(PrescriptionError):
        DefectPrescription([[0.5, 0.5]], [1]).plaquettes(LAT32)
    c = LAT32.plaquette_centers[10]
    with pytest.raises(PrescriptionError):
        DefectPrescription([c, c], [1, -1]).plaquettes(LAT32)
    pr = single(LAT32)
    assert np.allclose(pr.points, [[0.5 + 1 / 64] * 2])
    assert pr.alpha(LAT32).sum() == 1 and pr.to_dict()["h"] == 1


def test_ansatz_examples():
    v = vortex_ansatz(DefectPrescription.empty(), LAT32)
    assert np.allclose(v.values, [1, 0])
    pr = single(LAT32)
    assert vorticity_measure(vortex_ansatz(pr, LAT32)).same_atoms(pr.measure(SQUARE))
    pd = dipole(LAT32)
    mu = vorticity_measure(vortex_ansatz(pd, LAT32))
    assert mu.n_atoms == 2 and mu.total_mass == 0 and mu.same_atoms(pd.measure(SQUARE))


def test_ansatz_fails_fast_when_unresolved():
    # stacked opposite cores one cell apart next to the boundary: the ansatz phase wraps wrongly
    lat = build_lattice(SQUARE, 1 / 8)
    pr = DefectPrescription([[0.1875, 0.1875], [0.1875, 0.3125]], [1, -1])
    with pytest.raises(PrescriptionError):
        vortex_ansatz(pr, lat)


def test_dirac_string_examples():
    assert np.all(dirac_string(DefectPrescription.empty(), LAT32).values == 0)
    pr = single(LAT32)
    p = dirac_string(pr, LAT32)
    assert p.integral
    curl = discrete_curl(p)
    assert np.array_equal(curl, -pr.alpha(LAT32).astype(float))
    # nearest exit from the central cell crosses 15 or 16 bonds
    assert np.count_nonzero(p.values) in (15, 16)
    # cores 1/4 apart: the joining string (8 bonds) beats two exits (12 + 11)
    near = DefectPrescription.snapped(LAT32, [[0.375, 0.5], [0.625, 0.5]], [1, -1])
    joined = dirac_string(near, LAT32)
    assert np.array_equal(discrete_curl(joined), -near.alpha(LAT32).astype(float))
    assert np.count_nonzero(joined.values) == 8
    # cores 1/2 apart: two exits (8 + 7) beat the joining string (16)
    far = dirac_string(dipole(LAT32), LAT32)
    assert np.count_nonzero(far.values) == 15


def test_random_prescriptions_strings(rng):
    lat = build_lattice(SQUARE, 1 / 16)
    for _ in range(20):
        n = rng.integers(1, 8)
        q = rng.choice(lat.n_plaquettes, n, replace=False)
        pr = DefectPrescription(lat.plaquette_centers[q], rng.choice([-1, 1], n))
        assert np.array_equal(discrete_curl(dirac_string(pr, lat)), -pr.alpha(lat).astype(float))


def test_sd_empty():
    u, rep = sd_minimize(DefectPrescription.empty(), LAT32)
    assert np.all(u.values == 0) and rep.energy == 0 and rep.success


@pytest.mark.parametrize("make", [single, dipole])
def test_sd_single_and_dipole(make):
    pr = make(LAT32)
    u, rep = sd_minimize(pr, LAT32, trace=True)
    assert rep.success, rep.message
    assert rep.achieved.same_atoms(pr.measure(SQUARE))
    assert 0 <= rep.energy <= rep.extra["quadratic_energy"] * (1 + 1e-12)
    assert nonincreasing(rep.trace)
    assert rep.residual < 1e-9


def test_xy_empty():
    v, rep = xy_minimize(DefectPrescription.empty(), LAT32)
    assert rep.energy == 0 and np.allclose(v.values, [1, 0])


@pytest.mark.parametrize("precondition", [True, False])
def test_xy_descent_and_topology(precondition):
    pr = single(LAT32)
    v, rep = xy_minimize(pr, LAT32, trace=True, precondition=precondition, max_iter=20_000)
    assert rep.success, rep.message
    assert rep.energy <= xy_energy(vortex_ansatz(pr, LAT32)).total
    assert vorticity_measure(v).same_atoms(pr.measure(SQUARE))
    assert boundary_winding(v) == 1
    assert nonincreasing(rep.trace)
    assert np.allclose(np.linalg.norm(v.values, axis=1), 1, atol=1e-12)


def test_xy_scaled_energy_decreases_toward_pi():
    scaled = []
    for k in (4, 5, 6):
        lat = build_lattice(SQUARE, 2.0**-k)
        _, rep = xy_minimize(single(lat), lat)
        scaled.append(rep.energy / math.log(2.0**k))
    assert all(s > math.pi for s in scaled)
    assert scaled[0] > scaled[1] > scaled[2]


def test_sd_above_xy_after_minimisation():
    _, xr = xy_minimize(single(LAT32), LAT32)
    _, sr = sd_minimize(single(LAT32), LAT32)
    # the SD infimum dominates the XY one through the chord-arc inequality
    assert xr.energy <= FOUR_PI_SQ * sr.energy


def test_gl_empty():
    w, rep = gl_minimize(DefectPrescription.empty(), SQUARE, 1 / 16)
    assert rep.energy == pytest.approx(0, abs=1e-14)
    assert np.allclose(w.values, [1, 0])


def test_gl_single_vortex():
    eps = 1 / 32
    pr = single(build_lattice(SQUARE, eps))
    w, rep = gl_minimize(pr, SQUARE, eps, trace=True)
    assert rep.success, rep.message
    assert abs(rep.energy / math.log(32) - math.pi) < 0.15 * math.pi
    assert rep.achieved.same_atoms(pr.measure(SQUARE), atol=2 * eps)
    assert nonincreasing(rep.trace)
    assert np.all(np.linalg.norm(w.values, axis=1) <= 1 + 1e-12)
    assert rep.energy == pytest.approx(gl_energy(w, eps).total, rel=1e-9)
    assert rep.extra["mesh_size"] == eps / 2
    with pytest.raises(ValueError):
        gl_minimize(pr, SQUARE, eps, mesh_size=eps)


def test_trace_csv(tmp_path):
    _, rep = sd_minimize(single(LAT32), LAT32, trace=True)
    path = tmp_path / "trace.csv"
    write_trace(path, rep.trace)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iter", "energy", "step", "guard_rejects"]
    assert len(rows) == len(rep.trace) + 1
    d = rep.to_dict()
    assert d["model"] == "SD" and d["achieved"]["total_variation"] == 1
