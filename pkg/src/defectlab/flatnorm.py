"""Dual norm of compactly supported Lipschitz functions, evaluated on defect measures.

The test-function norm is max(sup|phi|, Lip(phi)) unless stated otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.optimize import linprog
from scipy.spatial.distance import pdist, squareform

from .defects import DefectMeasure
from .geometry import DomainGeometry, Triangulation, fem_mesh

MAX_EXACT_ATOMS = 200
# Primal weight times h; balances the primal and dual step sizes.
PRIMAL_WEIGHT = 1.0


@dataclass
class DualNormResult:
    value: float
    method: str
    gap: float = 0.0
    lower: float = float("nan")
    upper: float = float("nan")
    iterations: int = 0
    witness: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "lower": self.lower,
            "upper": self.upper,
            "method": self.method,
            "iterations": self.iterations,
        }


def flat_norm_atomic(
    mu: DefectMeasure, geometry: DomainGeometry | None = None, convention: str = "max"
) -> DualNormResult:
    """Exact norm of an atomic measure through a linear program on atom potentials.

    By McShane extension, values phi(a) at the atoms extend to an admissible
    test function iff |phi(a)| <= min(1, dist(a, boundary)) and
    |phi(a) - phi(b)| <= |a - b|. ``convention="sum"`` uses the norm
    sup|phi| + Lip(phi) instead and adds the Lipschitz constant as a variable.
    """
    if not mu.is_atomic:
        raise ValueError("flat_norm_atomic takes purely atomic measures")
    geometry = geometry if geometry is not None else mu.geometry
    if mu.n_atoms and not np.all(geometry.contains(mu.points)):
        raise ValueError("atom outside the domain")
    m = mu.merged()
    n = m.n_atoms
    if n == 0:
        return DualNormResult(0.0, "atomic-exact", 0.0, 0.0, 0.0, 0, np.zeros(0))
    if n > MAX_EXACT_ATOMS:
        raise ValueError(f"at most {MAX_EXACT_ATOMS} atoms for the exact solver")
    d = geometry.boundary_distance(m.points)
    w = m.weights
    iu, ju = np.triu_indices(n, 1)
    dist = squareform(pdist(m.points))[iu, ju] if n > 1 else np.zeros(0)
    npair = len(iu)
    rows = np.arange(npair)
    if convention == "max":
        # phi_i - phi_j <= |a_i - a_j| and the reverse
        a = np.zeros((2 * npair, n))
        a[rows, iu], a[rows, ju] = 1.0, -1.0
        a[npair + rows, iu], a[npair + rows, ju] = -1.0, 1.0
        b = np.concatenate([dist, dist])
        bounds = [(-c, c) for c in np.minimum(1.0, d)]
        res = linprog(-w, A_ub=a if npair else None, b_ub=b if npair else None, bounds=bounds, method="highs")
        phi = res.x
    elif convention == "sum":
        # variables (phi, L) with sup|phi| <= 1 - L, |phi_a| <= L d_a, Lip <= L
        a_list, b_list = [], []
        if npair:
            a = np.zeros((2 * npair, n + 1))
            a[rows, iu], a[rows, ju], a[rows, n] = 1.0, -1.0, -dist
            a[npair + rows, iu], a[npair + rows, ju], a[npair + rows, n] = -1.0, 1.0, -dist
            a_list.append(a)
            b_list.append(np.zeros(2 * npair))
        eye = np.eye(n)
        for sgn in (1.0, -1.0):
            a_list.append(np.column_stack([sgn * eye, -d]))
            b_list.append(np.zeros(n))
            a_list.append(np.column_stack([sgn * eye, np.ones(n)]))
            b_list.append(np.ones(n))
        bounds = [(None, None)] * n + [(0.0, 1.0)]
        res = linprog(
            -np.append(w, 0.0), A_ub=np.vstack(a_list), b_ub=np.concatenate(b_list),
            bounds=bounds, method="highs",
        )
        phi = res.x[:n]
    else:
        raise ValueError(f"unknown norm convention {convention!r}")
    if res.status != 0:
        raise RuntimeError(f"linear program failed: {res.message}")
    value = max(0.0, -float(res.fun))
    return DualNormResult(value, "atomic-exact", 0.0, value, value, int(res.nit), phi)


# ---------------------------------------------------------------------------
# Grid solver
#
# Nodes live on the full grid of the bounding box, stored as (nx, ny) arrays.
# Cell (i, j) holds a lower triangle (a, a+e1, a+e1+e2) and an upper one
# (a, a+e1+e2, a+e2); each carries a dual vector y (two components).


@dataclass
class _GridProblem:
    mesh: Triangulation
    shape: tuple[int, int]
    free: np.ndarray  # (nx, ny) bool
    loads: np.ndarray  # (nx, ny), <mu, hat_k>

    @property
    def h(self) -> float:
        return self.mesh.h


def _node_loads(mu: DefectMeasure, mesh: Triangulation) -> np.ndarray:
    loads = np.zeros(mesh.n_nodes)
    if mu.n_atoms:
        tri, bary = mesh.locate(mu.points)
        ok = tri >= 0
        np.add.at(loads, mesh.triangles[tri[ok]].ravel(), (bary[ok] * mu.weights[ok, None]).ravel())
    if mu.density is not None:
        src = mu.mesh
        corners = src.nodes[src.triangles]  # (T, 3, 2)
        mids = 0.5 * (corners + np.roll(corners, -1, axis=1))
        mass = np.repeat(mu.density * src.areas / 3.0, 3)
        # Edge-midpoint rule: exact for functions affine on each source triangle.
        tri, bary = mesh.locate(mids.reshape(-1, 2))
        ok = tri >= 0
        np.add.at(loads, mesh.triangles[tri[ok]].ravel(), (bary[ok] * mass[ok, None]).ravel())
    return loads


def _grid_problem(mu: DefectMeasure, geometry: DomainGeometry, h: float) -> _GridProblem:
    x0, y0, x1, y1 = geometry.bbox
    box = DomainGeometry.rectangle(x0 - h, y0 - h, x1 + h, y1 + h)
    mesh = fem_mesh(box, h)
    gx, gy = mesh.node_grid[:, 0], mesh.node_grid[:, 1]
    nx, ny = gx.max() - gx.min() + 1, gy.max() - gy.min() + 1
    if nx * ny != mesh.n_nodes:
        raise RuntimeError("grid mesh is not a full rectangle")

    def grid(a: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(a.reshape(ny, nx).T)

    pts = grid(mesh.nodes[:, 0]), grid(mesh.nodes[:, 1])
    inside = grid(geometry.contains(mesh.nodes, closed=True))
    # A cell is admissible when all four corners are in the closed (convex) domain;
    # free nodes are those whose every incident cell is admissible.
    cell_ok = inside[:-1, :-1] & inside[1:, :-1] & inside[:-1, 1:] & inside[1:, 1:]
    free = np.zeros((nx, ny), dtype=bool)
    free[1:-1, 1:-1] = (
        cell_ok[:-1, :-1] & cell_ok[1:, :-1] & cell_ok[:-1, 1:] & cell_ok[1:, 1:]
    )
    free &= grid(geometry.contains(np.column_stack([pts[0].T.ravel(), pts[1].T.ravel()])))
    return _GridProblem(mesh, (nx, ny), free, grid(_node_loads(mu, mesh)))


def _forward(phi: np.ndarray, h: float) -> tuple[np.ndarray, ...]:
    a, b = phi[:-1, :-1], phi[1:, :-1]
    c, d = phi[1:, 1:], phi[:-1, 1:]  # a, a+e1, a+e1+e2, a+e2
    return (b - a) / h, (c - b) / h, (c - d) / h, (d - a) / h


def _adjoint(y: tuple[np.ndarray, ...], shape: tuple[int, int], h: float) -> np.ndarray:
    l1, l2, u1, u2 = y
    out = np.zeros(shape)
    out[:-1, :-1] -= l1 + u2
    out[1:, :-1] += l1 - l2
    out[1:, 1:] += l2 + u1
    out[:-1, 1:] += u2 - u1
    return out / h


def _col_abs(shape: tuple[int, int], h: float) -> np.ndarray:
    ones = np.ones((shape[0] - 1, shape[1] - 1))
    out = np.zeros(shape)
    out[:-1, :-1] += 2 * ones
    out[1:, :-1] += 2 * ones
    out[1:, 1:] += 2 * ones
    out[:-1, 1:] += 2 * ones
    return out / h


def _pair_norm(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.sqrt(p * p + q * q)


def _certified_lower(prob: _GridProblem, phi: np.ndarray) -> tuple[float, np.ndarray]:
    phi = np.where(prob.free, phi, 0.0)
    l1, l2, u1, u2 = _forward(phi, prob.h)
    g = max(float(_pair_norm(l1, l2).max()), float(_pair_norm(u1, u2).max()))
    scale = max(1.0, g, float(np.abs(phi).max()))
    phi = phi / scale
    return math.fsum((prob.loads * phi).ravel().tolist()), phi


def _dual_upper(prob: _GridProblem, y: tuple[np.ndarray, ...]) -> float:
    l1, l2, u1, u2 = y
    resid = prob.loads - _adjoint(y, prob.shape, prob.h)
    mass = math.fsum(_pair_norm(l1, l2).ravel().tolist()) + math.fsum(_pair_norm(u1, u2).ravel().tolist())
    return mass + math.fsum(np.abs(resid[prob.free]).tolist())


@numba.njit(cache=True)
def _pdhg_steps(phi, phi_bar, l1, l2, u1, u2, work, tau, sigma, m, free, h, n_steps):
    """``n_steps`` primal-dual iterations, updating all arrays in place."""
    nx, ny = phi.shape
    for _ in range(n_steps):
        for i in range(nx):
            for j in range(ny):
                work[i, j] = 0.0
        for i in range(nx - 1):
            for j in range(ny - 1):
                a = phi_bar[i, j]
                b = phi_bar[i + 1, j]
                c = phi_bar[i + 1, j + 1]
                d = phi_bar[i, j + 1]
                p = l1[i, j] + sigma * (b - a) / h
                q = l2[i, j] + sigma * (c - b) / h
                r = np.sqrt(p * p + q * q)
                s = 1.0 - sigma / r if r > sigma else 0.0
                p *= s
                q *= s
                l1[i, j] = p
                l2[i, j] = q
                work[i, j] -= p / h
                work[i + 1, j] += (p - q) / h
                work[i + 1, j + 1] += q / h
                p = u1[i, j] + sigma * (c - d) / h
                q = u2[i, j] + sigma * (d - a) / h
                r = np.sqrt(p * p + q * q)
                s = 1.0 - sigma / r if r > sigma else 0.0
                p *= s
                q *= s
                u1[i, j] = p
                u2[i, j] = q
                work[i, j] -= q / h
                work[i + 1, j + 1] += p / h
                work[i, j + 1] += (q - p) / h
        for i in range(nx):
            for j in range(ny):
                old = phi[i, j]
                if free[i, j]:
                    v = old - tau[i, j] * (work[i, j] - m[i, j])
                    if v > 1.0:
                        v = 1.0
                    elif v < -1.0:
                        v = -1.0
                else:
                    v = 0.0
                phi[i, j] = v
                phi_bar[i, j] = 2.0 * v - old


def _pdhg(
    prob: _GridProblem,
    phi: np.ndarray,
    y: tuple[np.ndarray, ...],
    tol: float,
    max_iter: int,
    check_every: int = 100,
    upper: float = math.inf,
) -> tuple[np.ndarray, tuple[np.ndarray, ...], float, float, int]:
    """Diagonally preconditioned primal-dual iterations for

        max <m, phi>  s.t.  |phi| <= 1, |grad phi| <= 1 per triangle, phi = 0 off ``free``.
    """
    h = prob.h
    omega = PRIMAL_WEIGHT / h
    tau = omega / _col_abs(prob.shape, h)
    sigma = h / 2.0 / omega
    free = prob.free
    phi = np.ascontiguousarray(np.where(free, phi, 0.0))
    phi_bar = phi.copy()
    y = tuple(np.ascontiguousarray(a, dtype=float).copy() for a in y)
    work = np.zeros(prob.shape)
    best_lo, best_phi = _certified_lower(prob, phi)
    best_up = min(upper, _dual_upper(prob, y))
    it = 0
    while it < max_iter and best_up - best_lo >= tol:
        n = min(check_every, max_iter - it)
        _pdhg_steps(phi, phi_bar, *y, work, tau, sigma, prob.loads, free, h, n)
        it += n
        lo, cand = _certified_lower(prob, phi)
        if lo > best_lo:
            best_lo, best_phi = lo, cand
        best_up = min(best_up, _dual_upper(prob, y))
    return best_phi, y, best_lo, best_up, it


def _prolong(coarse: _GridProblem, fine: _GridProblem, phi, y):
    """Warm start on a grid of half the spacing covering the same box."""
    cm, fm = coarse.mesh, fine.mesh
    tri, bary = cm.locate(fm.nodes)
    flat_phi = phi.T.ravel()
    vals = np.zeros(fm.n_nodes)
    ok = tri >= 0
    vals[ok] = np.einsum("pk,pk->p", bary[ok], flat_phi[cm.triangles[tri[ok]]])
    nx, ny = fine.shape
    phi_f = np.ascontiguousarray(vals.reshape(ny, nx).T)
    # Dual vectors: each coarse triangle splits into four fine ones of a quarter area.
    yc = np.zeros((cm.n_triangles, 2))
    yc[0::2, 0], yc[0::2, 1] = y[0].T.ravel(), y[1].T.ravel()
    yc[1::2, 0], yc[1::2, 1] = y[2].T.ravel(), y[3].T.ravel()
    tri_f, _ = cm.locate(fm.centroids)
    yf = np.zeros((fm.n_triangles, 2))
    okf = tri_f >= 0
    yf[okf] = 0.25 * yc[tri_f[okf]]
    shp = (ny - 1, nx - 1)
    y_f = (
        yf[0::2, 0].reshape(shp).T.copy(),
        yf[0::2, 1].reshape(shp).T.copy(),
        yf[1::2, 0].reshape(shp).T.copy(),
        yf[1::2, 1].reshape(shp).T.copy(),
    )
    return phi_f, y_f


def flat_norm_grid(
    mu: DefectMeasure,
    geometry: DomainGeometry | None = None,
    resolution: float = 1 / 64,
    tol: float | None = None,
    max_iter: int = 100_000,
    levels: int | None = None,
) -> DualNormResult:
    """Certified lower bound of the norm from piecewise affine test functions.

    Test functions are P1 on a right-triangle grid of spacing ``resolution``
    with |phi| <= 1, per-triangle |grad phi| <= 1 and phi = 0 near the
    boundary, so every iterate rescaled to feasibility is admissible and gives
    a lower bound. The upper bound is the discrete dual objective, which
    bounds the grid problem from above. For atomic measures the exact atomic
    value bounds it as well, since every grid test function is admissible for
    the continuum problem. Coarser grids provide warm starts.
    """
    geometry = geometry if geometry is not None else mu.geometry
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    tv = mu.total_variation
    if tv == 0.0:
        return DualNormResult(0.0, "grid-dual-ascent", 0.0, 0.0, 0.0, 0)
    tol = tol if tol is not None else 1e-3 * (1.0 + tv)
    if levels is None:
        levels = max(0, min(4, int(math.floor(math.log2(geometry.d / (8 * resolution))))))
    upper = math.inf
    if mu.is_atomic and mu.merged().n_atoms <= MAX_EXACT_ATOMS:
        upper = flat_norm_atomic(mu, geometry).value
    prev = phi = y = None
    total_it = 0
    lo = up = 0.0
    for lev in range(levels, -1, -1):
        prob = _grid_problem(mu, geometry, resolution * 2**lev)
        if prev is None:
            nx, ny = prob.shape
            phi = np.zeros(prob.shape)
            y = tuple(np.zeros((nx - 1, ny - 1)) for _ in range(4))
        else:
            phi, y = _prolong(prev, prob, phi, y)
        lev_tol = tol * 2**lev
        phi, y, lo, up, it = _pdhg(prob, phi, y, lev_tol, max_iter, upper=upper)
        total_it += it
        prev = prob
    lo = max(lo, 0.0)
    return DualNormResult(lo, "grid-dual-ascent", max(up - lo, 0.0), lo, up, total_it, phi)
