"""Integer projection, discrete curl, dislocation/vortex measures, Jacobians and currents."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .fields import (
    TWO_PI,
    BondField,
    ContinuumField,
    DisplacementField,
    SpinField,
    discrete_gradient,
    phase_of,
)
from .geometry import DomainGeometry, Lattice, Triangulation, build_triangulation


def project_to_int(t):
    """Nearest integer with halves rounded down, so that t - P(t) lies in (-1/2, 1/2]."""
    out = np.ceil(np.asarray(t, dtype=float) - 0.5)
    if np.ndim(out) == 0:
        return int(out)
    return out


def strain_split(u: DisplacementField) -> tuple[BondField, BondField]:
    """(elastic, plastic) parts of the discrete gradient of ``u``."""
    du = discrete_gradient(u).values
    plastic = project_to_int(du)
    return BondField(u.lattice, du - plastic), BondField(u.lattice, plastic, integral=True)


def discrete_curl(xi: BondField | np.ndarray, lattice: Lattice | None = None, orientation: str = "ccw") -> np.ndarray:
    """Circulation of a bond field around every plaquette.

    ``"ccw"`` sums bottom + right - top - left, i.e. the counterclockwise
    circulation; ``"cw"`` is its negative, left + top - right - bottom.
    """
    if isinstance(xi, BondField):
        lattice, vals = xi.lattice, xi.values
    else:
        if lattice is None:
            raise ValueError("a raw bond array needs its lattice")
        vals = np.asarray(xi, dtype=float)
    pb = lattice.plaquette_bonds
    ccw = vals[pb[:, 0]] + vals[pb[:, 1]] - vals[pb[:, 2]] - vals[pb[:, 3]]
    if orientation == "ccw":
        return ccw
    if orientation == "cw":
        return -ccw
    raise ValueError(f"unknown orientation {orientation!r}")


@dataclass(eq=False)
class DefectMeasure:
    """Weighted Dirac atoms plus an optional per-triangle density.

    The density is a piecewise constant function on ``mesh`` (one value per
    triangle), extended by zero outside the mesh.
    """

    geometry: DomainGeometry
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    density: np.ndarray | None = None
    mesh: Triangulation | None = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.points) != len(self.weights):
            raise ValueError("points and weights differ in length")
        if len(self.points) and not np.all(self.geometry.contains(self.points)):
            raise ValueError("atom outside the domain")
        if self.density is not None:
            if self.mesh is None:
                raise ValueError("a density needs its mesh")
            self.density = np.asarray(self.density, dtype=float).reshape(self.mesh.n_triangles)

    @property
    def is_atomic(self) -> bool:
        return self.density is None

    @property
    def n_atoms(self) -> int:
        return len(self.weights)

    @property
    def total_mass(self) -> float:
        m = math.fsum(self.weights.tolist())
        if self.density is not None:
            m += math.fsum((self.density * self.mesh.areas).tolist())
        return m

    @property
    def total_variation(self) -> float:
        tv = math.fsum(np.abs(self.weights).tolist())
        if self.density is not None:
            tv += math.fsum((np.abs(self.density) * self.mesh.areas).tolist())
        return tv

    def scaled(self, factor: float) -> "DefectMeasure":
        dens = None if self.density is None else factor * self.density
        return DefectMeasure(self.geometry, self.points, factor * self.weights, dens, self.mesh)

    def __neg__(self) -> "DefectMeasure":
        return self.scaled(-1.0)

    def __add__(self, other: "DefectMeasure") -> "DefectMeasure":
        dens, mesh = self.density, self.mesh
        if other.density is not None:
            if dens is None:
                dens, mesh = other.density, other.mesh
            elif other.mesh is self.mesh:
                dens = dens + other.density
            else:
                raise ValueError("cannot add densities on different meshes")
        return DefectMeasure(
            self.geometry,
            np.concatenate([self.points, other.points]),
            np.concatenate([self.weights, other.weights]),
            dens,
            mesh,
        )

    def __sub__(self, other: "DefectMeasure") -> "DefectMeasure":
        return self + (-other)

    def atoms_only(self) -> "DefectMeasure":
        return DefectMeasure(self.geometry, self.points, self.weights)

    def merged(self, decimals: int = 12) -> "DefectMeasure":
        """Combine coincident atoms and drop zero weights."""
        if self.n_atoms == 0:
            return self
        key = np.round(self.points, decimals)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        w = np.zeros(len(uniq))
        np.add.at(w, inv.ravel(), self.weights)
        pts = np.zeros((len(uniq), 2))
        pts[inv.ravel()] = self.points
        keep = w != 0
        return DefectMeasure(self.geometry, pts[keep], w[keep], self.density, self.mesh)

    def same_atoms(self, other: "DefectMeasure", atol: float = 1e-12) -> bool:
        a, b = self.merged(), other.merged()
        if a.n_atoms != b.n_atoms:
            return False
        ia = np.lexsort((a.points[:, 0], a.points[:, 1]))
        ib = np.lexsort((b.points[:, 0], b.points[:, 1]))
        return bool(
            np.allclose(a.points[ia], b.points[ib], atol=atol, rtol=0)
            and np.array_equal(a.weights[ia], b.weights[ib])
        )

    def to_dict(self, density_file: str | None = None) -> dict:
        out = {
            "atoms": [[float(p[0]), float(p[1]), float(w)] for p, w in zip(self.points, self.weights)],
            "total_variation": self.total_variation,
        }
        if density_file is not None:
            out["density_file"] = density_file
        return out

    def to_json(self, density_file: str | None = None) -> str:
        return json.dumps(self.to_dict(density_file))

    @classmethod
    def from_dict(cls, geometry: DomainGeometry, data: dict) -> "DefectMeasure":
        atoms = np.asarray(data.get("atoms", []), dtype=float).reshape(-1, 3)
        return cls(geometry, atoms[:, :2], atoms[:, 2])


def dislocation_function(u: DisplacementField) -> np.ndarray:
    """alpha_u per plaquette, an integer array with values in {-1, 0, 1}."""
    du = discrete_gradient(u).values
    # curl(du - P du) = -curl(P du) up to rounding; the integer form is exact.
    alpha = -discrete_curl(project_to_int(du), u.lattice)
    if np.any(np.abs(alpha) > 1):
        raise AssertionError("dislocation weight outside {-1, 0, 1}")
    return alpha.astype(np.int64)


def _plaquette_measure(lattice: Lattice, alpha: np.ndarray) -> DefectMeasure:
    nz = np.nonzero(alpha)[0]
    return DefectMeasure(lattice.geometry, lattice.plaquette_centers[nz], alpha[nz].astype(float))


def dislocation_measure(u: DisplacementField) -> DefectMeasure:
    return _plaquette_measure(u.lattice, dislocation_function(u))


def vorticity_function(v: SpinField) -> np.ndarray:
    return dislocation_function(phase_of(v))


def vorticity_measure(v: SpinField) -> DefectMeasure:
    return dislocation_measure(phase_of(v))


def jacobian(w: ContinuumField) -> np.ndarray:
    """det grad w per triangle."""
    g = w.gradient()
    return g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0]


def jacobian_density(w: ContinuumField, geometry: DomainGeometry | None = None) -> DefectMeasure:
    """Per-triangle det grad w as the density part of a measure.

    Without ``geometry`` the bounding box of the mesh stands in for the domain.
    """
    if geometry is None:
        x0, y0 = w.mesh.nodes.min(axis=0)
        x1, y1 = w.mesh.nodes.max(axis=0)
        geometry = DomainGeometry.rectangle(x0, y0, x1, y1)
    return DefectMeasure(geometry, density=jacobian(w), mesh=w.mesh)


def winding_boundary_integral(v: SpinField, plaquette) -> float | np.ndarray:
    """(1/pi) times the boundary integral of v1 d(v2)/ds around plaquette cells.

    Along each edge the phase is interpolated linearly with total increment
    2 pi times the elastic strain of that bond, so every edge contributes
    dtheta/2 + (sin 2 theta_end - sin 2 theta_start)/4 in closed form.
    """
    lat = v.lattice
    idx = np.atleast_1d(np.asarray(plaquette, dtype=np.int64))
    u = phase_of(v)
    elastic, _ = strain_split(u)
    theta = TWO_PI * u.values
    corners = lat.plaquette_corners[idx]  # ccw: a, a+e1, a+e1+e2, a+e2
    pb = lat.plaquette_bonds[idx]  # bottom, right, top, left
    # Traverse ccw; the top and left bonds run against their canonical orientation.
    edges = [(0, 0, 1.0), (1, 1, 1.0), (2, 2, -1.0), (3, 3, -1.0)]
    total = np.zeros(len(idx))
    for start, b, sign in edges:
        th0 = theta[corners[:, start]]
        dth = sign * TWO_PI * elastic.values[pb[:, b]]
        th1 = th0 + dth
        total += dth / 2 + (np.sin(2 * th1) - np.sin(2 * th0)) / 4
    out = total / np.pi
    if np.ndim(plaquette) == 0:
        return float(out[0])
    return out


def current(w: ContinuumField) -> np.ndarray:
    """j(w) = w x grad w per triangle, using the triangle's nodal mean of w."""
    g = w.gradient()
    wbar = w.values[w.mesh.triangles].mean(axis=1)
    return wbar[:, 0, None] * g[:, 1, :] - wbar[:, 1, None] * g[:, 0, :]


def discrete_strain_field(u: DisplacementField, mesh: Triangulation | None = None) -> np.ndarray:
    """Per-triangle elastic strain of the piecewise affine interpolant of ``u``.

    The gradient times eps is a pair of bond jumps; those are projected as
    bonds are and divided back by eps, so eps * result lies in (-1/2, 1/2]^2.
    """
    mesh = mesh if mesh is not None else build_triangulation(u.lattice)
    eps = u.lattice.epsilon
    jumps = mesh.gradient(u.values[mesh.node_site]) * mesh.h
    return (jumps - project_to_int(jumps)) / eps


def discrete_current(v: SpinField, mesh: Triangulation | None = None) -> np.ndarray:
    return TWO_PI * discrete_strain_field(phase_of(v), mesh)


def boundary_winding(v: SpinField) -> int:
    """Winding number of ``v`` along the boundary loop of a rectangular lattice."""
    loop = v.lattice.boundary_loop()
    th = v.angles[np.append(loop, loop[0])]
    d = np.diff(th)
    d = (d + np.pi) % TWO_PI - np.pi
    return int(round(d.sum() / TWO_PI))
