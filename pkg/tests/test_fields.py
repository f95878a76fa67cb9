from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from defectlab.fields import (
    ContinuumField,
    DisplacementField,
    SamplingError,
    SpinField,
    discrete_gradient,
    exp_of,
    extend_to_domain,
    interpolate_pl,
    phase_of,
    read_field_csv,
    sample_on_net,
    write_spin_field,
)
from defectlab.geometry import DomainGeometry, build_lattice, build_triangulation, fem_mesh
from defectlab.solvers import DefectPrescription, vortex_ansatz

LAT16 = build_lattice(DomainGeometry.unit_square(), 1 / 16)
finite = st.floats(-50, 50, allow_nan=False)


def test_gradient_examples():
    lat = build_lattice(DomainGeometry.unit_square(), 1 / 4)
    assert np.all(discrete_gradient(DisplacementField(lat, np.full(9, 2.5))).values == 0)
    du = discrete_gradient(DisplacementField(lat, lat.ij[:, 0].astype(float))).values
    assert np.array_equal(du, np.where(lat.bond_axis == 0, 1.0, 0.0))


@settings(max_examples=30, deadline=None)
@given(vals=arrays(float, LAT16.n_sites, elements=finite), c=finite)
def test_gradient_translation_invariant(vals, c):
    a = discrete_gradient(DisplacementField(LAT16, vals)).values
    b = discrete_gradient(DisplacementField(LAT16, vals + c)).values
    assert np.allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("angle, u", [(0.0, 0.0), (np.pi / 2, 0.25), (np.pi, 0.5)])
def test_phase_examples(angle, u):
    got = phase_of(SpinField.constant(LAT16, angle)).values
    assert np.allclose(got, u, atol=1e-15)
    assert np.all((got >= 0) & (got < 1))


def test_exp_examples():
    assert np.allclose(exp_of(DisplacementField(LAT16, np.zeros(LAT16.n_sites))).values, [1, 0])
    assert np.allclose(exp_of(DisplacementField(LAT16, np.full(LAT16.n_sites, 0.75))).values, [0, -1], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(
    ticks=arrays(np.int64, LAT16.n_sites, elements=st.integers(-5 * 2**20, 5 * 2**20)),
    k=st.integers(-20, 20),
)
def test_exp_periodic_exact_on_representable_shifts(ticks, k):
    # dyadic values make u + k exact in floating point
    vals = ticks / 2.0**20
    v = exp_of(DisplacementField(LAT16, vals))
    assert np.array_equal(exp_of(DisplacementField(LAT16, vals + k)).values, v.values)


@settings(max_examples=50, deadline=None)
@given(vals=arrays(float, LAT16.n_sites, elements=st.floats(-5, 5)), k=st.integers(-20, 20))
def test_exp_periodic_and_roundtrip(vals, k):
    u = DisplacementField(LAT16, vals)
    v = exp_of(u)
    assert np.allclose(exp_of(DisplacementField(LAT16, vals + k)).values, v.values, atol=1e-14)
    back = exp_of(phase_of(v))
    assert np.allclose(back.values, v.values, atol=1e-12)
    assert np.allclose(np.linalg.norm(v.values, axis=1), 1, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(vals=arrays(float, LAT16.n_sites, elements=st.floats(-5, 5)))
def test_chord_arc_identity(vals):
    u = DisplacementField(LAT16, vals)
    v = exp_of(u)
    b = LAT16.bonds
    chord = np.sum((v.values[b[:, 0]] - v.values[b[:, 1]]) ** 2, axis=1)
    t = vals[b[:, 1]] - vals[b[:, 0]]
    dist = np.abs(t - np.round(t))
    assert np.allclose(chord, 4 * np.sin(np.pi * dist) ** 2, atol=1e-12)
    assert np.all(chord <= 4 * np.pi**2 * dist**2 + 1e-12)


def test_interpolation_examples(rng):
    v = SpinField.constant(LAT16, 0.3)
    w = interpolate_pl(v)
    pts = rng.uniform(0.1, 0.9, size=(200, 2))
    assert np.allclose(w.evaluate(pts), [np.cos(0.3), np.sin(0.3)])
    mesh = build_triangulation(build_lattice(DomainGeometry.unit_square(), 1 / 4))
    vals = np.zeros((mesh.n_nodes, 2))
    tri = mesh.triangles[0]
    vals[tri] = [[1, 0], [0, 1], [0, 1]]
    w = ContinuumField(mesh, vals)
    assert np.allclose(w.evaluate(mesh.nodes[tri].mean(axis=0)[None]), [[1 / 3, 2 / 3]])


def test_interpolation_affine_exact_and_bounded(rng):
    mesh = build_triangulation(LAT16)
    a = rng.standard_normal((2, 2))
    w = ContinuumField(mesh, mesh.nodes @ a.T + [0.3, -0.1])
    pts = rng.uniform(0.07, 0.93, size=(300, 2))
    assert np.allclose(w.evaluate(pts), pts @ a.T + [0.3, -0.1])
    v = SpinField.from_angles(LAT16, rng.uniform(0, 2 * np.pi, LAT16.n_sites))
    assert np.all(np.linalg.norm(interpolate_pl(v).evaluate(pts), axis=1) <= 1 + 1e-12)


def test_vortex_interpolant_dips_near_core():
    c = 0.5 + 1 / 32
    pr = DefectPrescription([[c, c]], [1])
    w = interpolate_pl(vortex_ansatz(pr, LAT16))
    near = np.array([[c, c], [c + 1 / 16, c], [c, c - 1 / 16], [c - 1 / 16, c + 1 / 16]])
    assert np.all(np.linalg.norm(w.evaluate(near), axis=1) < 1)


def test_sampling_examples():
    coarse = build_lattice(DomainGeometry.unit_square(), 1 / 8)
    mesh = build_triangulation(LAT16)
    up = ContinuumField(mesh, np.tile([0.0, 1.0], (mesh.n_nodes, 1)))
    res = sample_on_net(up, coarse, np.zeros(2))
    assert np.allclose(res.field.values, [0, 1]) and res.radial_defect == 0
    two = ContinuumField(mesh, np.tile([2.0, 0.0], (mesh.n_nodes, 1)))
    res = sample_on_net(two, coarse, np.zeros(2))
    assert np.allclose(res.field.values, [1, 0]) and res.radial_defect == pytest.approx(1.0)
    # a field with a zero at (1/2, 1/2), which is a coarse site
    vals = mesh.nodes - 0.5
    with pytest.raises(SamplingError):
        sample_on_net(ContinuumField(mesh, vals), coarse, np.zeros(2))


def test_extension_and_csv(tmp_path, rng):
    v = SpinField.from_angles(LAT16, rng.uniform(0, 1, LAT16.n_sites))
    w = interpolate_pl(v)
    big = extend_to_domain(w, fem_mesh(DomainGeometry.unit_square(), 1 / 16))
    assert np.all(np.isfinite(big.values))
    assert np.allclose(big.evaluate(w.mesh.nodes), w.values)
    path = tmp_path / "spins.csv"
    write_spin_field(path, v)
    pts, vals, meta = read_field_csv(path)
    assert np.array_equal(pts, LAT16.points) and np.array_equal(vals, v.values)
    assert meta["n_sites"] == LAT16.n_sites and meta["field"] == "spin"
    assert path.read_text().splitlines()[0] == "x,y,val0,val1"
