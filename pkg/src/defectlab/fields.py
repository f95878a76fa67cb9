"""Order parameters of the three models and the pointwise maps between them."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Lattice, Triangulation

TWO_PI = 2 * np.pi
SAMPLING_THRESHOLD = 1e-8


class SamplingError(RuntimeError):
    """A sampled continuum value is too close to zero to normalise."""


@dataclass(eq=False)
class SpinField:
    """One unit vector per lattice site, stored as an (n, 2) array."""

    lattice: Lattice
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float).reshape(self.lattice.n_sites, 2)

    @classmethod
    def from_angles(cls, lattice: Lattice, theta: np.ndarray) -> "SpinField":
        theta = np.asarray(theta, dtype=float)
        return cls(lattice, np.column_stack([np.cos(theta), np.sin(theta)]))

    @classmethod
    def constant(cls, lattice: Lattice, angle: float = 0.0) -> "SpinField":
        return cls.from_angles(lattice, np.full(lattice.n_sites, angle))

    @property
    def angles(self) -> np.ndarray:
        return np.arctan2(self.values[:, 1], self.values[:, 0])

    def renormalize(self) -> None:
        self.values /= np.linalg.norm(self.values, axis=1, keepdims=True)

    def rotated(self, phi: float) -> "SpinField":
        c, s = np.cos(phi), np.sin(phi)
        rot = np.array([[c, -s], [s, c]])
        return SpinField(self.lattice, self.values @ rot.T)

    def copy(self) -> "SpinField":
        return SpinField(self.lattice, self.values.copy())


@dataclass(eq=False)
class DisplacementField:
    lattice: Lattice
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float).reshape(self.lattice.n_sites)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("displacement values must be finite")

    def copy(self) -> "DisplacementField":
        return DisplacementField(self.lattice, self.values.copy())


@dataclass(eq=False)
class BondField:
    """One real per bond; ``integral`` marks plastic strains and Dirac strings."""

    lattice: Lattice
    values: np.ndarray
    integral: bool = False

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float).reshape(self.lattice.n_bonds)
        if self.integral and not np.all(self.values == np.round(self.values)):
            raise ValueError("integral bond field has non-integer entries")


@dataclass(eq=False)
class ContinuumField:
    """P1 vector field on a triangulation, one value per node."""

    mesh: Triangulation
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float).reshape(self.mesh.n_nodes, 2)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Affine interpolation inside the containing triangle; NaN outside the mesh."""
        tri, bary = self.mesh.locate(points)
        out = np.full((len(tri), 2), np.nan)
        ok = tri >= 0
        corners = self.mesh.triangles[tri[ok]]
        out[ok] = np.einsum("pk,pkc->pc", bary[ok], self.values[corners])
        return out

    def gradient(self) -> np.ndarray:
        """(n_triangles, 2 components, 2 directions)."""
        return self.mesh.gradient(self.values)

    def copy(self) -> "ContinuumField":
        return ContinuumField(self.mesh, self.values.copy())


def discrete_gradient(u: DisplacementField) -> BondField:
    b = u.lattice.bonds
    return BondField(u.lattice, u.values[b[:, 1]] - u.values[b[:, 0]])


def phase_of(v: SpinField) -> DisplacementField:
    """u = theta / 2pi with theta the phase in [0, 2pi)."""
    theta = np.mod(np.arctan2(v.values[:, 1], v.values[:, 0]), TWO_PI)
    u = theta / TWO_PI
    u[u >= 1.0] = 0.0
    return DisplacementField(v.lattice, u)


def exp_of(u: DisplacementField) -> SpinField:
    """v = exp(2 pi i u)."""
    # Reduce first so that u and u + k give bit-identical spins.
    frac = u.values - np.floor(u.values)
    return SpinField.from_angles(u.lattice, TWO_PI * frac)


def interpolate_pl(v: SpinField, mesh: Triangulation | None = None) -> ContinuumField:
    """Piecewise-affine interpolation of a spin field on the lattice triangles."""
    from .geometry import build_triangulation

    mesh = mesh if mesh is not None else build_triangulation(v.lattice)
    return ContinuumField(mesh, v.values[mesh.node_site])


def extend_to_domain(w: ContinuumField, target: Triangulation) -> ContinuumField:
    """Extend ``w`` onto a larger mesh with the same spacing.

    Nodes of ``target`` outside the mesh of ``w`` copy the value of the nearest
    node of ``w`` along the boundary normal, i.e. the value at the coordinatewise
    clamped position. Gradients grow by at most a fixed factor.
    """
    src = w.mesh
    lo = src.nodes.min(axis=0)
    hi = src.nodes.max(axis=0)
    pts = np.clip(target.nodes, lo, hi)
    vals = w.evaluate(pts)
    bad = np.isnan(vals[:, 0])
    if np.any(bad):
        # Non-rectangular meshes: fall back to the nearest node.
        from scipy.spatial import cKDTree

        _, idx = cKDTree(src.nodes).query(target.nodes[bad])
        vals[bad] = w.values[idx]
    return ContinuumField(target, vals)


@dataclass
class SampleResult:
    field: SpinField
    radial_defect: float
    raw: np.ndarray


def sample_on_net(
    w: ContinuumField,
    coarse: Lattice,
    shift: np.ndarray,
    points: np.ndarray | None = None,
) -> SampleResult:
    """Normalised samples of ``w`` at the coarse sites shifted by ``shift``.

    ``points`` overrides the sample locations (before the shift) for callers
    that compose with a dilation. Raises :class:`SamplingError` when a sample
    lands outside the mesh or on a near-zero of ``w``.
    """
    base = coarse.points if points is None else np.asarray(points, dtype=float)
    raw = w.evaluate(base + np.asarray(shift, dtype=float))
    if np.any(np.isnan(raw)):
        raise SamplingError("sample point outside the continuum mesh")
    mod = np.linalg.norm(raw, axis=1)
    if np.any(mod < SAMPLING_THRESHOLD):
        raise SamplingError("sample hit a zero of the continuum field")
    field = SpinField(coarse, raw / mod[:, None])
    return SampleResult(field, float(np.max(np.abs(mod - 1.0))) if len(mod) else 0.0, raw)


def write_field_csv(path: str | Path, points: np.ndarray, values: np.ndarray, meta: dict) -> None:
    """CSV with header ``x,y,val...`` plus a JSON sidecar ``<path>.json``."""
    path = Path(path)
    vals = np.asarray(values, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    header = ["x", "y"] + (["val"] if vals.shape[1] == 1 else [f"val{k}" for k in range(vals.shape[1])])
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p, row in zip(points, vals):
            writer.writerow([repr(float(p[0])), repr(float(p[1]))] + [repr(float(x)) for x in row])
    tmp.replace(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_field_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return data[:, :2], data[:, 2:], meta


def lattice_meta(lattice: Lattice) -> dict:
    return {
        "domain": lattice.geometry.to_dict(),
        "epsilon": lattice.epsilon,
        "closed": lattice.closed,
        "n_sites": lattice.n_sites,
        "n_bonds": lattice.n_bonds,
        "n_plaquettes": lattice.n_plaquettes,
    }


def write_spin_field(path: str | Path, v: SpinField) -> None:
    write_field_csv(path, v.lattice.points, v.values, {**lattice_meta(v.lattice), "field": "spin"})


def write_displacement_field(path: str | Path, u: DisplacementField) -> None:
    write_field_csv(
        path, u.lattice.points, u.values, {**lattice_meta(u.lattice), "field": "displacement"}
    )
