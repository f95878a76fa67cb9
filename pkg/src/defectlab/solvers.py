"""Constrained minimizers for the XY, screw-dislocation and Ginzburg-Landau energies.

Each solver keeps the defect measure equal to a prescription: XY and SD by
rejecting any step that changes it, GL softly through boundary data and
seeded vortex cores.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, factorized

from .defects import (
    DefectMeasure,
    discrete_curl,
    dislocation_function,
    jacobian,
    vorticity_function,
)
from .energies import ScalingRegime, fsum, gl_energy, sd_energy, xy_energy
from .fields import BondField, ContinuumField, DisplacementField, SpinField
from .geometry import DomainGeometry, Lattice, Triangulation, fem_mesh

CG_RTOL = 1e-10
GRAD_TOL = 1e-8
MAX_ITER = 100_000
# GL descent: preconditioner mass shift (in units of 1/eps^2) and largest step
GL_SHIFT = 2.0
GL_MAX_STEP = 64.0
GL_REL_TOL = 1e-9


class PrescriptionError(ValueError):
    """The prescription cannot be realised on this lattice."""


@dataclass
class DefectPrescription:
    """Point defects of degree +-1 at plaquette centers."""

    points: np.ndarray
    degrees: np.ndarray
    regime: ScalingRegime = field(default_factory=ScalingRegime)

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.degrees = np.asarray(self.degrees, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.degrees):
            raise ValueError("points and degrees differ in length")
        if np.any(np.abs(self.degrees) != 1):
            raise ValueError("degrees must be +1 or -1")

    @classmethod
    def empty(cls, regime: ScalingRegime | None = None) -> "DefectPrescription":
        return cls(np.zeros((0, 2)), np.zeros(0, np.int64), regime or ScalingRegime())

    @classmethod
    def snapped(
        cls, lattice: Lattice, points, degrees, regime: ScalingRegime | None = None
    ) -> "DefectPrescription":
        """Move each point to the center of the plaquette containing it (or the nearest one)."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        centers = lattice.plaquette_centers
        out = np.empty_like(pts)
        for k, p in enumerate(pts):
            q = lattice.plaquette_of(p[None])[0]
            if q < 0:
                q = int(np.argmin(np.sum((centers - p) ** 2, axis=1)))
            out[k] = centers[q]
        return cls(out, degrees, regime or ScalingRegime())

    def __len__(self) -> int:
        return len(self.degrees)

    def plaquettes(self, lattice: Lattice) -> np.ndarray:
        idx = lattice.plaquette_of(self.points) if len(self) else np.zeros(0, np.int64)
        if np.any(idx < 0):
            raise PrescriptionError("defect outside every plaquette")
        centers = lattice.plaquette_centers[idx]
        if not np.allclose(centers, self.points, atol=1e-9 * lattice.epsilon, rtol=0):
            raise PrescriptionError("defects must sit at plaquette centers")
        if len(np.unique(idx)) != len(idx):
            raise PrescriptionError("two defects share a plaquette")
        return idx

    def alpha(self, lattice: Lattice) -> np.ndarray:
        a = np.zeros(lattice.n_plaquettes, dtype=np.int64)
        a[self.plaquettes(lattice)] = self.degrees
        return a

    def measure(self, geometry: DomainGeometry) -> DefectMeasure:
        return DefectMeasure(geometry, self.points, self.degrees.astype(float))

    def to_dict(self) -> dict:
        return {
            "atoms": [[float(p[0]), float(p[1]), int(d)] for p, d in zip(self.points, self.degrees)],
            "h": self.regime.h,
        }


@dataclass
class SolveReport:
    energy: float
    iterations: int
    guard_rejections: int
    achieved: DefectMeasure | None
    residual: float = 0.0
    success: bool = True
    message: str = ""
    model: str = ""
    extra: dict = field(default_factory=dict)
    trace: list = field(default_factory=list, repr=False)
    wall_ms: float = 0.0

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "energy": self.energy,
            "iterations": self.iterations,
            "guard_rejections": self.guard_rejections,
            "residual": self.residual,
            "success": self.success,
            "message": self.message,
            "achieved": None if self.achieved is None else self.achieved.to_dict(),
            **self.extra,
        }


def write_trace(path: str | Path, trace: list) -> None:
    """Energy trace CSV with header ``iter,energy,step,guard_rejects``."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "energy", "step", "guard_rejects"])
        for row in trace:
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), row[3]])
    tmp.replace(path)


# ---------------------------------------------------------------------------
# Ansatz and Dirac strings


def ansatz_phase(prescription: DefectPrescription, points: np.ndarray) -> np.ndarray:
    theta = np.zeros(len(points))
    for a, d in zip(prescription.points, prescription.degrees):
        theta += d * np.arctan2(points[:, 1] - a[1], points[:, 0] - a[0])
    return theta


def vortex_ansatz(prescription: DefectPrescription, lattice: Lattice) -> SpinField:
    """v(l) = exp(i sum_k d_k arg(l - a_k)); fails if the vorticity differs."""
    target = prescription.alpha(lattice)
    v = SpinField.from_angles(lattice, ansatz_phase(prescription, lattice.points))
    if not np.array_equal(vorticity_function(v), target):
        raise PrescriptionError("ansatz misses the prescription at this spacing; refine eps")
    return v


def _exit_lengths(lattice: Lattice, plaq: int) -> dict[str, int]:
    """Number of plaquettes between ``plaq`` and the lattice edge in each direction."""
    base = lattice.ij[lattice.plaquettes[plaq]]
    have = np.zeros(lattice.n_sites, dtype=bool)
    have[lattice.plaquettes] = True
    out = {}
    for name, step in (("left", (-1, 0)), ("right", (1, 0)), ("down", (0, -1)), ("up", (0, 1))):
        n = 0
        k = base + step
        while True:
            s = lattice.site_index(k[None])[0]
            if s < 0 or not have[s]:
                break
            n += 1
            k = k + step
        out[name] = n
    return out


def _string_bonds(lattice: Lattice, plaq: int, direction: str, stop: int | None = None):
    """(bond ordinals, sign) of the branch cut from a plaquette in a direction.

    With ``sign * degree`` on these bonds the ccw curl is ``-degree`` at the
    plaquette and zero at every other plaquette. ``stop`` limits the number of
    bonds (used to join two defects in one row).
    """
    ij = lattice.ij[lattice.plaquettes[plaq]]
    step, axis, first, sign = {
        "left": ((-1, 0), 1, (0, 0), 1),
        "right": ((1, 0), 1, (1, 0), -1),
        "down": ((0, -1), 0, (0, 0), -1),
        "up": ((0, 1), 0, (0, 1), 1),
    }[direction]
    bonds = []
    k = ij + first
    bond_of = {}
    while True:
        s = lattice.site_index(k[None])[0]
        if s < 0:
            break
        if not bond_of:
            # ordinals of the bonds starting at each site, by axis
            ids = np.full((lattice.n_sites, 2), -1, dtype=np.int64)
            ids[lattice.bonds[:, 0], lattice.bond_axis] = np.arange(lattice.n_bonds)
            bond_of["ids"] = ids
        b = bond_of["ids"][s, axis]
        if b < 0:
            break
        bonds.append(b)
        if stop is not None and len(bonds) >= stop:
            break
        k = k + step
    return np.array(bonds, dtype=np.int64), sign


def dirac_string(prescription: DefectPrescription, lattice: Lattice) -> BondField:
    """Integer bond field whose ccw curl is minus the prescribed defect pattern.

    Each defect gets a straight cut to the nearest lattice edge; opposite
    defects in the same row are joined directly when that is shorter.
    """
    p = np.zeros(lattice.n_bonds)
    if len(prescription) == 0:
        return BondField(lattice, p, integral=True)
    plaq = prescription.plaquettes(lattice)
    deg = prescription.degrees
    exits = [_exit_lengths(lattice, int(q)) for q in plaq]
    single = [min(e.values()) + 1 for e in exits]
    cell = lattice.ij[lattice.plaquettes[plaq]]
    pairs = []
    for a in range(len(plaq)):
        for b in range(len(plaq)):
            if deg[a] + deg[b] != 0 or cell[a, 1] != cell[b, 1] or cell[a, 0] >= cell[b, 0]:
                continue
            length = int(cell[b, 0] - cell[a, 0])
            if length < single[a] + single[b]:
                pairs.append((length - single[a] - single[b], a, b, length))
    used = np.zeros(len(plaq), dtype=bool)
    for _, a, b, length in sorted(pairs):
        if used[a] or used[b]:
            continue
        bonds, sign = _string_bonds(lattice, int(plaq[a]), "right", stop=length)
        if len(bonds) != length:
            continue
        p[bonds] += sign * deg[a]
        used[a] = used[b] = True
    for k in np.nonzero(~used)[0]:
        e = exits[k]
        direction = min(e, key=lambda name: (e[name], name))
        bonds, sign = _string_bonds(lattice, int(plaq[k]), direction)
        p[bonds] += sign * deg[k]
    field_ = BondField(lattice, p, integral=True)
    if not np.array_equal(discrete_curl(field_), -prescription.alpha(lattice).astype(float)):
        raise PrescriptionError("Dirac string construction failed")
    return field_


# ---------------------------------------------------------------------------
# Screw dislocations


def incidence(lattice: Lattice) -> sp.csr_matrix:
    """Bond-by-site matrix with (du)_b = u(j) - u(i)."""
    nb = lattice.n_bonds
    rows = np.repeat(np.arange(nb), 2)
    cols = lattice.bonds.ravel()
    vals = np.tile([-1.0, 1.0], nb)
    return sp.csr_matrix((vals, (rows, cols)), shape=(nb, lattice.n_sites))


def _neighbour_table(lattice: Lattice) -> np.ndarray:
    """(n_sites, 4) neighbour ordinals, -1 where absent."""
    nb = np.full((lattice.n_sites, 4), -1, dtype=np.int64)
    for k, off in enumerate(((1, 0), (-1, 0), (0, 1), (0, -1))):
        nb[:, k] = lattice.site_index(lattice.ij + off)
    return nb


def _site_relax(u: np.ndarray, sites: np.ndarray, nbr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact minimiser of sum_j dist^2(x - u_j, Z) at each site, with its gain.

    The minimiser is the mean of u_j + k_j for the integer branch vector k in
    force there, and minima never sit on a kink, so enumerating the three
    branches per neighbour compatible with |x - u_i| <= 1/2 is exhaustive.
    """
    nb = nbr[sites]
    mask = nb >= 0
    un = np.where(mask, u[np.where(mask, nb, 0)], 0.0)
    ui = u[sites]
    k0 = np.ceil(ui[:, None] - un - 0.5)
    deg = mask.sum(axis=1)

    def energy(x):
        t = x[:, None] - un
        r = t - np.round(t)
        return 0.5 * np.sum(np.where(mask, r * r, 0.0), axis=1)

    best_x = ui.copy()
    best_e = energy(ui)
    e0 = best_e.copy()
    for combo in np.ndindex(3, 3, 3, 3):
        shift = np.array(combo) - 1
        x = np.sum(np.where(mask, un + k0 + shift, 0.0), axis=1) / np.maximum(deg, 1)
        e = energy(x)
        better = e < best_e
        best_x = np.where(better, x, best_x)
        best_e = np.where(better, e, best_e)
    return best_x, e0 - best_e


def _plaquettes_of_sites(lattice: Lattice) -> list[np.ndarray]:
    out: list[list[int]] = [[] for _ in range(lattice.n_sites)]
    for q, corners in enumerate(lattice.plaquette_corners):
        for s in corners:
            out[s].append(q)
    return [np.array(x, dtype=np.int64) for x in out]


def sd_minimize(
    prescription: DefectPrescription,
    lattice: Lattice,
    max_sweeps: int = 1000,
    trace: bool = False,
) -> tuple[DisplacementField, SolveReport]:
    """Quadratic relaxation around a Dirac string, then guarded site relaxation."""
    t0 = time.perf_counter()
    target = prescription.alpha(lattice)
    p = dirac_string(prescription, lattice).values
    n = lattice.n_sites
    if len(prescription) == 0:
        u = DisplacementField(lattice, np.zeros(n))
        rep = SolveReport(0.0, 0, 0, dislocation_measure_of(u), model="SD")
        rep.wall_ms = 1e3 * (time.perf_counter() - t0)
        return u, rep
    d = incidence(lattice)
    lap = (d.T @ d).tocsr()
    rhs = d.T @ p
    # The Neumann Laplacian is singular; rhs has zero mean so CG stays consistent.
    x, info = cg(lap, rhs, rtol=CG_RTOL, atol=0.0, maxiter=20 * n)
    x -= x.mean()
    resid = float(np.linalg.norm(rhs - lap @ x) / max(np.linalg.norm(rhs), 1e-300))
    quad = 0.5 * fsum((d @ x - p) ** 2)
    u = x
    field_ = DisplacementField(lattice, u)
    energy = sd_energy(field_).total
    iters = 0
    rejected = 0
    rows = [(0, energy, 0.0, 0)] if trace else []
    if not np.array_equal(dislocation_function(field_), target):
        return field_, SolveReport(
            energy, 0, 0, dislocation_measure_of(field_), resid, False,
            "quadratic relaxation changed the defect pattern", "SD",
            {"quadratic_energy": quad, "cg_info": int(info)},
        )
    # Branch refits: with p' = P(du) the quadratic energy majorises SD and
    # touches it at u, so re-solving never increases SD; curl p' = -alpha.
    for _ in range(20):
        branch = np.ceil(d @ u - 0.5)
        if np.array_equal(branch, p):
            break
        p = branch
        rhs = d.T @ p
        cand, _ = cg(lap, rhs, x0=u, rtol=CG_RTOL, atol=0.0, maxiter=20 * n)
        cand -= cand.mean()
        trial = DisplacementField(lattice, cand)
        e_new = sd_energy(trial).total
        if e_new > energy or not np.array_equal(dislocation_function(trial), target):
            break
        u, energy = cand, e_new
        iters += 1
        if trace:
            rows.append((iters, energy, 0.0, rejected))
    nbr = _neighbour_table(lattice)
    colour = (lattice.ij[:, 0] + lattice.ij[:, 1]) % 2
    classes = [np.nonzero(colour == c)[0] for c in (0, 1)]
    site_plaq = _plaquettes_of_sites(lattice)
    for sweep in range(iters, iters + max_sweeps):
        before = energy
        for sites in classes:
            new, gain = _site_relax(u, sites, nbr)
            move = gain > 0
            if not np.any(move):
                continue
            moved = sites[move]
            old = u[moved].copy()
            u[moved] = new[move]
            # topology guard: revert moved sites on plaquettes whose weight changed
            while True:
                alpha = dislocation_function(DisplacementField(lattice, u))
                bad = np.nonzero(alpha != target)[0]
                if len(bad) == 0:
                    break
                corners = np.unique(lattice.plaquette_corners[bad].ravel())
                revert = np.isin(moved, corners) & (u[moved] != old)
                if not np.any(revert):
                    raise RuntimeError("topology guard could not restore the defect pattern")
                u[moved[revert]] = old[revert]
                rejected += int(revert.sum())
        iters = sweep + 1
        energy = sd_energy(DisplacementField(lattice, u)).total
        if trace:
            rows.append((iters, energy, 0.0, rejected))
        if before - energy <= 1e-12 * max(abs(before), 1e-300):
            break
    field_ = DisplacementField(lattice, u)
    achieved = dislocation_measure_of(field_)
    ok = np.array_equal(dislocation_function(field_), target)
    msg = "" if ok else "defect pattern lost"
    if ok and energy > 1.5 * quad:
        ok, msg = False, "guard deadlock: energy far above the quadratic bound"
    rep = SolveReport(
        energy, iters, rejected, achieved, resid, ok, msg, "SD",
        {"quadratic_energy": quad, "cg_info": int(info)}, rows,
    )
    rep.wall_ms = 1e3 * (time.perf_counter() - t0)
    return field_, rep


def dislocation_measure_of(u: DisplacementField) -> DefectMeasure:
    from .defects import dislocation_measure

    return dislocation_measure(u)


# ---------------------------------------------------------------------------
# XY spins


def _laplacian_solver(lattice: Lattice):
    """Factorised Neumann Laplacian with the constant mode pinned."""
    d = incidence(lattice)
    lap = (d.T @ d).tocsc()
    lap = lap + sp.identity(lattice.n_sites, format="csc") * 1e-10
    lap[0, 0] += 1.0
    return factorized(lap.tocsc())


def _xy_energy_theta(theta: np.ndarray, bonds: np.ndarray) -> float:
    return fsum(1.0 - np.cos(theta[bonds[:, 1]] - theta[bonds[:, 0]]))


def _xy_grad_theta(theta: np.ndarray, bonds: np.ndarray, n: int) -> np.ndarray:
    s = np.sin(theta[bonds[:, 0]] - theta[bonds[:, 1]])
    g = np.bincount(bonds[:, 0], weights=s, minlength=n)
    g -= np.bincount(bonds[:, 1], weights=s, minlength=n)
    return g


def xy_minimize(
    prescription: DefectPrescription,
    lattice: Lattice,
    max_iter: int = MAX_ITER,
    grad_tol: float = GRAD_TOL,
    trace: bool = False,
    precondition: bool = True,
) -> tuple[SpinField, SolveReport]:
    """Guarded descent on the phases from the vortex ansatz.

    The energy sum (1 - cos dtheta) over bonds is decreased along the gradient
    taken in the metric of the lattice Laplacian (``precondition=True``) or the
    plain one, with Barzilai-Borwein steps, Armijo backtracking and a guard
    that halves the step whenever the vorticity would change.
    """
    t0 = time.perf_counter()
    v0 = vortex_ansatz(prescription, lattice)
    target = prescription.alpha(lattice)
    bonds = lattice.bonds
    n = lattice.n_sites
    theta = v0.angles.copy()
    solve = _laplacian_solver(lattice) if precondition and n > 1 else None
    energy = _xy_energy_theta(theta, bonds)
    g = _xy_grad_theta(theta, bonds, n)
    rows = [(0, energy, 0.0, 0)] if trace else []
    step = 1.0
    rejected = 0
    it = 0
    prev = None
    while it < max_iter and np.max(np.abs(g), initial=0.0) >= grad_tol:
        it += 1
        dvec = -(solve(g) if solve is not None else g)
        if prev is not None:
            s, yv = prev
            sy = float(s @ yv)
            if sy > 0:
                step = float(s @ s) / sy if solve is None else sy / float(yv @ (solve(yv)))
                step = min(max(step, 1e-8), 1e8) if solve is None else min(max(step, 1e-6), 10.0)
        slope = float(g @ dvec)
        if slope >= 0:
            dvec, slope = -g, -float(g @ g)
        t = step
        accepted = False
        while t > 1e-16:
            cand = theta + t * dvec
            e_new = _xy_energy_theta(cand, bonds)
            if e_new <= energy + 1e-4 * t * slope:
                vnew = SpinField.from_angles(lattice, cand)
                if np.array_equal(vorticity_function(vnew), target):
                    accepted = True
                    break
                rejected += 1
            t *= 0.5
        if not accepted:
            break
        g_new = _xy_grad_theta(cand, bonds, n)
        prev = (cand - theta, g_new - g)
        theta, g, energy = cand, g_new, e_new
        if trace:
            rows.append((it, energy, t, rejected))
    v = SpinField.from_angles(lattice, theta)
    achieved_f = vorticity_function(v)
    from .defects import vorticity_measure

    gnorm = float(np.max(np.abs(g), initial=0.0))
    ok = bool(np.array_equal(achieved_f, target))
    msg = "" if gnorm < grad_tol else "stopped before the gradient tolerance"
    rep = SolveReport(
        xy_energy(v).total, it, rejected, vorticity_measure(v), gnorm, ok, msg, "XY",
        {"ansatz_energy": xy_energy(v0).total}, rows,
    )
    rep.wall_ms = 1e3 * (time.perf_counter() - t0)
    return v, rep


# ---------------------------------------------------------------------------
# Ginzburg-Landau


def _stiffness(mesh: Triangulation) -> sp.csr_matrix:
    """P1 stiffness matrix of the right-triangle mesh."""
    t = mesh.triangles
    lower = mesh.tags < 0
    h = mesh.h
    # Gradient rows per triangle (coefficients on the 3 local nodes), times h.
    g1 = np.where(lower[:, None], [[-1.0, 1.0, 0.0]], [[0.0, 1.0, -1.0]])
    g2 = np.where(lower[:, None], [[0.0, -1.0, 1.0]], [[-1.0, 0.0, 1.0]])
    area = mesh.areas
    local = (g1[:, :, None] * g1[:, None, :] + g2[:, :, None] * g2[:, None, :]) / h**2
    local *= area[:, None, None]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))


def jacobian_atoms(w: ContinuumField, cell: float, geometry: DomainGeometry) -> DefectMeasure:
    """Vortex atoms read off the Jacobian of ``w``.

    The integral of det grad w is summed over 3x3 blocks of square cells of
    side ``cell``; a cell whose block carries |int J| > pi/2 and is a local
    maximum of |int J| among its eight neighbours becomes an atom at the cell
    center with weight sign * round(|int J|/pi).
    """
    mesh = w.mesh
    jac = jacobian(w) * mesh.areas
    idx = np.floor(mesh.centroids / cell).astype(np.int64)
    lo = idx.min(axis=0) - 1
    shape = tuple(idx.max(axis=0) - lo + 2)
    grid = np.zeros(shape)
    np.add.at(grid, (idx[:, 0] - lo[0], idx[:, 1] - lo[1]), jac)
    pad = np.pad(grid, 1)
    block = sum(
        pad[1 + dx : 1 + dx + shape[0], 1 + dy : 1 + dy + shape[1]]
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
    )
    mag = np.abs(block)
    padm = np.pad(mag, 1, constant_values=-1.0)
    peak = mag > np.pi / 2
    order = np.arange(mag.size).reshape(shape)
    pado = np.pad(order, 1, constant_values=-1)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            nb = padm[1 + dx : 1 + dx + shape[0], 1 + dy : 1 + dy + shape[1]]
            nbo = pado[1 + dx : 1 + dx + shape[0], 1 + dy : 1 + dy + shape[1]]
            # ties go to the lower cell ordinal
            peak &= (mag > nb) | ((mag == nb) & (order < nbo))
    cx, cy = np.nonzero(peak)
    pts = (np.column_stack([cx, cy]) + lo + 0.5) * cell
    wts = np.sign(block[cx, cy]) * np.maximum(1.0, np.round(mag[cx, cy] / np.pi))
    inside = geometry.contains(pts) if len(pts) else np.zeros(0, bool)
    return DefectMeasure(geometry, pts[inside], wts[inside])


def gl_minimize(
    prescription: DefectPrescription,
    geometry: DomainGeometry,
    epsilon: float,
    mesh_size: float | None = None,
    max_iter: int = 2000,
    grad_tol: float = 1e-8,
    trace: bool = False,
) -> tuple[ContinuumField, SolveReport]:
    """Projected descent for the GL energy with vortex boundary data.

    Boundary nodes carry the ansatz; the start is the ansatz damped by
    min(1, r/eps) around each core; each step is preconditioned by the
    stiffness plus a mass shift, clipped to |w| <= 1 at nodes, and accepted
    by Armijo backtracking.
    """
    t0 = time.perf_counter()
    h = mesh_size if mesh_size is not None else epsilon / 2
    if h > epsilon / 2 * (1 + 1e-12):
        raise ValueError("mesh size must be at most eps/2")
    mesh = fem_mesh(geometry, h)
    nodes = mesh.nodes
    theta = ansatz_phase(prescription, nodes)
    w = np.column_stack([np.cos(theta), np.sin(theta)])
    for a in prescription.points:
        r = np.hypot(nodes[:, 0] - a[0], nodes[:, 1] - a[1])
        w *= np.minimum(1.0, r / epsilon)[:, None]
    bnd = np.zeros(mesh.n_nodes, dtype=bool)
    bnd[mesh.boundary_nodes()] = True
    free = np.nonzero(~bnd)[0]
    k = _stiffness(mesh)
    mass = mesh.lumped_mass
    coef = 1.0 / epsilon**2

    def energy_of(x: np.ndarray) -> float:
        # fast form for the line search; the reported value uses gl_energy
        mod = np.linalg.norm(x, axis=1)
        return 0.5 * float(np.sum(x * (k @ x))) + coef * float(mass @ (1.0 - mod) ** 2)

    def grad_of(x: np.ndarray) -> np.ndarray:
        mod = np.linalg.norm(x, axis=1)
        safe = np.maximum(mod, 1e-300)
        pot = (2 * coef * mass * (mod - 1.0) / safe)[:, None] * x
        return k @ x + pot

    # Stiffness on both components plus a mass shift along the ansatz direction
    # only: the modulus is stiff on the core scale, the phase is not.
    kff = k[free][:, free]
    nf = len(free)
    dirs = np.column_stack([np.cos(theta[free]), np.sin(theta[free])])
    blk = (GL_SHIFT * coef * mass[free])[:, None, None] * dirs[:, :, None] * dirs[:, None, :]
    r_idx = np.repeat(2 * np.arange(nf)[:, None] + np.arange(2), 2, axis=1).ravel()
    c_idx = np.tile(2 * np.arange(nf)[:, None] + np.arange(2), (1, 2)).ravel()
    coupled = sp.kron(kff, sp.identity(2)) + sp.csr_matrix(
        (blk.ravel(), (r_idx, c_idx)), shape=(2 * nf, 2 * nf)
    )
    prec = factorized(coupled.tocsc())

    def clip(x: np.ndarray) -> np.ndarray:
        mod = np.linalg.norm(x, axis=1)
        return x / np.maximum(mod, 1.0)[:, None]

    w = clip(w)
    energy = energy_of(w)
    rows = [(0, energy, 0.0, 0)] if trace else []
    it = 0
    gnorm = math.inf
    step = 1.0
    for it in range(1, max_iter + 1):
        g = grad_of(w)
        gf = g[free]
        gnorm = float(np.max(np.abs(gf), initial=0.0))
        if gnorm < grad_tol:
            it -= 1
            break
        d = np.zeros_like(w)
        d[free] = -prec(gf.ravel()).reshape(-1, 2)
        t = min(GL_MAX_STEP, 2 * step)
        accepted = False
        while t > 1e-12:
            cand = clip(w + t * d)
            e_new = energy_of(cand)
            if e_new <= energy + 1e-4 * float(np.sum(g * (cand - w))):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        step = t
        rel = (energy - e_new) / max(energy, 1e-300)
        w, energy = cand, e_new
        if trace:
            rows.append((it, energy, t, 0))
        if rel < GL_REL_TOL:
            break
    field_ = ContinuumField(mesh, w)
    energy = gl_energy(field_, epsilon).total
    achieved = jacobian_atoms(field_, epsilon, geometry)
    target = prescription.measure(geometry)
    ok = achieved.n_atoms == len(prescription) and np.array_equal(
        np.sort(achieved.weights), np.sort(prescription.degrees.astype(float))
    )
    from .flatnorm import flat_norm_atomic

    drift = flat_norm_atomic(achieved - target).value if ok else float("nan")
    rep = SolveReport(
        energy, it, 0, achieved, gnorm, bool(ok),
        "" if ok else "Jacobian atoms differ from the prescription", "GL",
        {"flat_residual": drift, "mesh_size": h}, rows,
    )
    rep.wall_ms = 1e3 * (time.perf_counter() - t0)
    return field_, rep
