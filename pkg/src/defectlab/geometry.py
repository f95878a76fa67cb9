"""Domains, square lattices, plaquettes and right-triangle meshes.

Lattice sites are exactly the points of eps*Z^2 inside the domain; the grid is
anchored at the coordinate origin and never offset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Predicate = Callable[[np.ndarray], np.ndarray]

# (dx, dy) offsets of the four cell corners, counterclockwise from the lower left.
_CORNERS = np.array([[0, 0], [1, 0], [1, 1], [0, 1]])


class GeometryError(ValueError):
    """Rejected geometric input (bad parameters, spacing too large, ...)."""


@dataclass(frozen=True)
class DomainGeometry:
    """An open, bounded domain that is star-shaped about ``center``.

    ``kind`` is one of ``"square"``, ``"rectangle"`` or ``"disk"``. Rectangles
    (and squares) are axis aligned and given by ``(x0, y0, x1, y1)``; disks by
    ``(cx, cy, r)``.
    """

    kind: str
    params: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.kind in ("square", "rectangle"):
            if len(self.params) != 4:
                raise GeometryError(f"{self.kind} needs (x0, y0, x1, y1)")
            x0, y0, x1, y1 = self.params
            if not (x1 > x0 and y1 > y0):
                raise GeometryError("degenerate rectangle")
            if self.kind == "square" and not math.isclose(x1 - x0, y1 - y0):
                raise GeometryError("square sides differ")
        elif self.kind == "disk":
            if len(self.params) != 3 or self.params[2] <= 0:
                raise GeometryError("disk needs (cx, cy, r) with r > 0")
        else:
            raise GeometryError(f"unknown domain kind {self.kind!r}")

    @classmethod
    def unit_square(cls) -> "DomainGeometry":
        return cls("square", (0.0, 0.0, 1.0, 1.0))

    @classmethod
    def rectangle(cls, x0: float, y0: float, x1: float, y1: float) -> "DomainGeometry":
        return cls("rectangle", (float(x0), float(y0), float(x1), float(y1)))

    @classmethod
    def disk(cls, cx: float, cy: float, r: float) -> "DomainGeometry":
        return cls("disk", (float(cx), float(cy), float(r)))

    @classmethod
    def from_dict(cls, spec: dict) -> "DomainGeometry":
        kind = spec.get("kind", "square")
        if kind in ("unit-square", "unit_square"):
            return cls.unit_square()
        if kind in ("square", "rectangle"):
            if "bounds" in spec:
                return cls(kind, tuple(float(b) for b in spec["bounds"]))
            if kind == "square" and "side" in spec:
                x0, y0 = spec.get("origin", (0.0, 0.0))
                s = float(spec["side"])
                return cls("square", (x0, y0, x0 + s, y0 + s))
            return cls.unit_square()
        if kind == "disk":
            cx, cy = spec.get("center", (0.0, 0.0))
            return cls.disk(cx, cy, spec["radius"])
        raise GeometryError(f"unknown domain kind {kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "disk":
            cx, cy, r = self.params
            return {"kind": "disk", "center": [cx, cy], "radius": r}
        return {"kind": self.kind, "bounds": list(self.params)}

    @property
    def center(self) -> np.ndarray:
        if self.kind == "disk":
            return np.array(self.params[:2], dtype=float)
        x0, y0, x1, y1 = self.params
        return np.array([(x0 + x1) / 2, (y0 + y1) / 2])

    @property
    def d(self) -> float:
        """Distance from the center to the boundary."""
        if self.kind == "disk":
            return float(self.params[2])
        x0, y0, x1, y1 = self.params
        return min(x1 - x0, y1 - y0) / 2

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        if self.kind == "disk":
            cx, cy, r = self.params
            return (cx - r, cy - r, cx + r, cy + r)
        return tuple(self.params)  # type: ignore[return-value]

    @property
    def diameter(self) -> float:
        x0, y0, x1, y1 = self.bbox
        if self.kind == "disk":
            return 2 * self.params[2]
        return math.hypot(x1 - x0, y1 - y0)

    def contains(self, points: np.ndarray, closed: bool = False) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        x, y = p[:, 0], p[:, 1]
        if self.kind == "disk":
            cx, cy, r = self.params
            r2 = (x - cx) ** 2 + (y - cy) ** 2
            return r2 <= r * r if closed else r2 < r * r
        x0, y0, x1, y1 = self.params
        if closed:
            return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
        return (x > x0) & (x < x1) & (y > y0) & (y < y1)

    def boundary_distance(self, points: np.ndarray) -> np.ndarray:
        """Euclidean distance to the boundary (0 outside the domain)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "disk":
            cx, cy, r = self.params
            dist = r - np.hypot(p[:, 0] - cx, p[:, 1] - cy)
        else:
            x0, y0, x1, y1 = self.params
            dist = np.minimum.reduce(
                [p[:, 0] - x0, x1 - p[:, 0], p[:, 1] - y0, y1 - p[:, 1]]
            )
        return np.maximum(dist, 0.0)

    def axis_boundary_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance to the boundary measured along the two coordinate axes."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "disk":
            cx, cy, r = self.params
            dx = np.abs(p[:, 0] - cx)
            dy = np.abs(p[:, 1] - cy)
            # half-chords of the horizontal and vertical lines through x
            hx = np.sqrt(np.maximum(r * r - dy**2, 0.0))
            hy = np.sqrt(np.maximum(r * r - dx**2, 0.0))
            return np.minimum(hx - dx, hy - dy)
        x0, y0, x1, y1 = self.params
        return np.minimum.reduce([p[:, 0] - x0, x1 - p[:, 0], p[:, 1] - y0, y1 - p[:, 1]])

    def boundary_samples(self, n: int = 256) -> np.ndarray:
        if self.kind == "disk":
            cx, cy, r = self.params
            t = np.linspace(0, 2 * np.pi, n, endpoint=False)
            return np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)])
        x0, y0, x1, y1 = self.params
        t = np.linspace(0, 1, n // 4, endpoint=False)
        return np.concatenate(
            [
                np.column_stack([x0 + (x1 - x0) * t, np.full_like(t, y0)]),
                np.column_stack([np.full_like(t, x1), y0 + (y1 - y0) * t]),
                np.column_stack([x1 - (x1 - x0) * t, np.full_like(t, y1)]),
                np.column_stack([np.full_like(t, x0), y1 - (y1 - y0) * t]),
            ]
        )


def inner_region(geometry: DomainGeometry, delta: float) -> Predicate:
    """Membership predicate of the inner region I_delta.

    A point belongs to it when it lies in the domain and both axis-parallel
    lines through it stay inside for more than ``delta`` on each side.
    """
    if delta < 0:
        raise GeometryError("delta must be nonnegative")

    def predicate(points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        inside = geometry.contains(p)
        if delta == 0:
            return inside
        return inside & (geometry.axis_boundary_distance(p) > delta)

    return predicate


def dilation_factor(geometry: DomainGeometry, delta_tilde: float) -> float:
    """lambda = d / (d - 2 delta_tilde)."""
    d = geometry.d
    if delta_tilde < 0 or 2 * delta_tilde >= d:
        raise GeometryError(
            f"dilation needs 0 <= 2*delta_tilde < d (delta_tilde={delta_tilde}, d={d})"
        )
    return d / (d - 2 * delta_tilde)


def dilate(points: np.ndarray, center: np.ndarray, factor: float) -> np.ndarray:
    return center + factor * (np.asarray(points, dtype=float) - center)


@dataclass(frozen=True, eq=False)
class Lattice:
    """Sites, nearest-neighbour bonds and plaquettes of eps*Z^2 in a domain.

    Sites are ordered lexicographically by (x2, x1). Bonds point from ``i`` to
    ``j`` with ``i <= j`` componentwise; ``bond_axis`` is 0 for horizontal and 1
    for vertical bonds. ``plaquette_bonds`` lists (bottom, right, top, left)
    bond ordinals of each cell.
    """

    geometry: DomainGeometry
    epsilon: float
    closed: bool
    ij: np.ndarray
    bonds: np.ndarray
    bond_axis: np.ndarray
    plaquettes: np.ndarray
    plaquette_bonds: np.ndarray
    plaquette_corners: np.ndarray
    _grid: np.ndarray = field(repr=False)
    _grid_origin: tuple[int, int] = field(repr=False)

    @property
    def points(self) -> np.ndarray:
        return self.ij * self.epsilon

    @property
    def n_sites(self) -> int:
        return len(self.ij)

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    @property
    def n_plaquettes(self) -> int:
        return len(self.plaquettes)

    @property
    def plaquette_centers(self) -> np.ndarray:
        return (self.ij[self.plaquettes] + 0.5) * self.epsilon

    @property
    def bond_midpoints(self) -> np.ndarray:
        return 0.5 * (self.points[self.bonds[:, 0]] + self.points[self.bonds[:, 1]])

    def site_index(self, ij: np.ndarray) -> np.ndarray:
        """Ordinals of integer grid coordinates (-1 where absent)."""
        ij = np.atleast_2d(np.asarray(ij, dtype=np.int64))
        gx = ij[:, 0] - self._grid_origin[0]
        gy = ij[:, 1] - self._grid_origin[1]
        nx, ny = self._grid.shape
        ok = (gx >= 0) & (gx < nx) & (gy >= 0) & (gy < ny)
        out = np.full(len(ij), -1, dtype=np.int64)
        out[ok] = self._grid[gx[ok], gy[ok]]
        return out

    def site_at(self, point: np.ndarray) -> int:
        k = np.rint(np.asarray(point, dtype=float) / self.epsilon).astype(np.int64)
        return int(self.site_index(k[None, :])[0])

    def plaquette_of(self, points: np.ndarray) -> np.ndarray:
        """Plaquette ordinal containing each point (-1 if none)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        corner = np.floor(pts / self.epsilon).astype(np.int64)
        sites = self.site_index(corner)
        lookup = np.full(self.n_sites, -1, dtype=np.int64)
        lookup[self.plaquettes] = np.arange(self.n_plaquettes)
        out = np.full(len(pts), -1, dtype=np.int64)
        ok = sites >= 0
        out[ok] = lookup[sites[ok]]
        return out

    def bond_region_mask(self, region: Predicate | None) -> np.ndarray:
        if region is None:
            return np.ones(self.n_bonds, dtype=bool)
        inside = np.asarray(region(self.points), dtype=bool)
        return inside[self.bonds[:, 0]] & inside[self.bonds[:, 1]]

    def boundary_loop(self) -> np.ndarray:
        """Counterclockwise site loop along the boundary of a rectangular lattice."""
        ix, iy = self.ij[:, 0], self.ij[:, 1]
        x0, x1, y0, y1 = ix.min(), ix.max(), iy.min(), iy.max()
        path = (
            [(x, y0) for x in range(x0, x1)]
            + [(x1, y) for y in range(y0, y1)]
            + [(x, y1) for x in range(x1, x0, -1)]
            + [(x0, y) for y in range(y1, y0, -1)]
        )
        idx = self.site_index(np.array(path))
        if np.any(idx < 0):
            raise GeometryError("boundary loop needs a full rectangular lattice")
        return idx


def build_lattice(
    geometry: DomainGeometry, epsilon: float, closed: bool = False, strict: bool = False
) -> Lattice:
    """Build the eps-lattice of ``geometry``.

    ``closed=True`` takes sites in the closure of the domain (used for FEM meshes
    that must reach the boundary). ``strict=True`` additionally enforces
    ``eps < d/4`` and at least one plaquette.
    """
    if not epsilon > 0:
        raise GeometryError("epsilon must be positive")
    if strict and not epsilon < geometry.d / 4:
        raise GeometryError(f"epsilon={epsilon} not below d/4={geometry.d / 4}")
    x0, y0, x1, y1 = geometry.bbox
    kx0, ky0 = math.floor(x0 / epsilon) - 1, math.floor(y0 / epsilon) - 1
    kx1, ky1 = math.ceil(x1 / epsilon) + 1, math.ceil(y1 / epsilon) + 1
    gx, gy = np.meshgrid(np.arange(kx0, kx1 + 1), np.arange(ky0, ky1 + 1), indexing="ij")
    cand = np.column_stack([gx.ravel(), gy.ravel()])
    inside = geometry.contains(cand * epsilon, closed=closed)
    ij = cand[inside]
    if len(ij) == 0:
        raise GeometryError(f"no lattice sites for epsilon={epsilon}")
    order = np.lexsort((ij[:, 0], ij[:, 1]))
    ij = ij[order]

    grid = np.full(gx.shape, -1, dtype=np.int64)
    grid[ij[:, 0] - kx0, ij[:, 1] - ky0] = np.arange(len(ij))

    def lookup(k: np.ndarray) -> np.ndarray:
        out = np.full(len(k), -1, dtype=np.int64)
        ok = (
            (k[:, 0] >= kx0) & (k[:, 0] <= kx1) & (k[:, 1] >= ky0) & (k[:, 1] <= ky1)
        )
        out[ok] = grid[k[ok, 0] - kx0, k[ok, 1] - ky0]
        return out

    n = len(ij)
    right = lookup(ij + [1, 0])
    up = lookup(ij + [0, 1])
    # Bonds ordered by their lower site, horizontal before vertical.
    src = np.concatenate([np.arange(n), np.arange(n)])
    dst = np.concatenate([right, up])
    axis = np.concatenate([np.zeros(n, np.int64), np.ones(n, np.int64)])
    keep = dst >= 0
    key = np.lexsort((axis[keep], src[keep]))
    bonds = np.column_stack([src[keep], dst[keep]])[key]
    bond_axis = axis[keep][key]

    bond_id = np.full((n, 2), -1, dtype=np.int64)
    bond_id[bonds[:, 0], bond_axis] = np.arange(len(bonds))

    corners = np.stack([lookup(ij + c) for c in _CORNERS], axis=1)
    # Domains are convex: four corners inside means the closed cell is inside.
    cell_ok = np.all(corners >= 0, axis=1)
    plaq = np.nonzero(cell_ok)[0]
    pc = corners[plaq]
    p_bonds = np.column_stack(
        [
            bond_id[pc[:, 0], 0],  # bottom: i -> i+e1
            bond_id[pc[:, 1], 1],  # right:  i+e1 -> i+e1+e2
            bond_id[pc[:, 3], 0],  # top:    i+e2 -> i+e1+e2
            bond_id[pc[:, 0], 1],  # left:   i -> i+e2
        ]
    )
    return Lattice(
        geometry=geometry,
        epsilon=float(epsilon),
        closed=closed,
        ij=ij,
        bonds=bonds,
        bond_axis=bond_axis,
        plaquettes=plaq,
        plaquette_bonds=p_bonds,
        plaquette_corners=pc,
        _grid=grid,
        _grid_origin=(kx0, ky0),
    )


@dataclass(frozen=True, eq=False)
class Triangulation:
    """Conforming mesh of right triangles, two per square cell.

    Cell ``c`` with lower-left node ``a`` contributes the lower triangle
    (a, a+e1, a+e1+e2), tagged -1, and the upper triangle (a, a+e1+e2, a+e2),
    tagged +1; both are counterclockwise. Node coordinates are
    ``origin + h * grid_index`` so point location is arithmetic.
    """

    h: float
    origin: np.ndarray
    nodes: np.ndarray
    node_grid: np.ndarray
    triangles: np.ndarray
    tags: np.ndarray
    node_site: np.ndarray
    _cell_lookup: np.ndarray = field(repr=False)
    _cell_origin: tuple[int, int] = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def areas(self) -> np.ndarray:
        return np.full(self.n_triangles, 0.5 * self.h * self.h)

    @property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @property
    def lumped_mass(self) -> np.ndarray:
        mass = np.zeros(self.n_nodes)
        np.add.at(mass, self.triangles.ravel(), np.repeat(self.areas / 3, 3))
        return mass

    def gradient(self, values: np.ndarray) -> np.ndarray:
        """Per-triangle gradient of the P1 interpolant.

        ``values`` has shape (n_nodes,) or (n_nodes, k); the result has shape
        (n_triangles, 2) or (n_triangles, k, 2) with the last axis (d/dx1, d/dx2).
        """
        v = np.asarray(values, dtype=float)
        t = self.triangles
        lower = self.tags < 0
        # lower: (a, a+e1, a+e1+e2); upper: (a, a+e1+e2, a+e2)
        d1 = np.where(_bcast(lower, v), v[t[:, 1]] - v[t[:, 0]], v[t[:, 1]] - v[t[:, 2]])
        d2 = np.where(_bcast(lower, v), v[t[:, 2]] - v[t[:, 1]], v[t[:, 2]] - v[t[:, 0]])
        return np.stack([d1, d2], axis=-1) / self.h

    def boundary_nodes(self) -> np.ndarray:
        """Nodes lying on an edge that belongs to exactly one triangle."""
        t = self.triangles
        edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        edges = np.sort(edges, axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        return np.unique(uniq[counts == 1].ravel())

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Triangle index (-1 if outside) and barycentric weights of each point."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        local = (pts - self.origin) / self.h
        cell = np.floor(local).astype(np.int64)
        frac = local - cell
        nx, ny = self._cell_lookup.shape
        cx = cell[:, 0] - self._cell_origin[0]
        cy = cell[:, 1] - self._cell_origin[1]
        tri = np.full(len(pts), -1, dtype=np.int64)
        ok = (cx >= 0) & (cx < nx) & (cy >= 0) & (cy < ny)
        base = np.full(len(pts), -1, dtype=np.int64)
        base[ok] = self._cell_lookup[cx[ok], cy[ok]]
        # Points on a cell edge may belong to the left/lower neighbour instead.
        for sx, sy in ((1, 0), (0, 1), (1, 1)):
            miss = (base < 0) & (frac[:, 0] * sx == 0) & (frac[:, 1] * sy == 0)
            if not np.any(miss):
                continue
            cxm, cym = cx - sx, cy - sy
            okm = miss & (cxm >= 0) & (cxm < nx) & (cym >= 0) & (cym < ny)
            hit = np.full(len(pts), -1, dtype=np.int64)
            hit[okm] = self._cell_lookup[cxm[okm], cym[okm]]
            got = hit >= 0
            base[got] = hit[got]
            if sx:
                frac[got, 0] = 1.0
            if sy:
                frac[got, 1] = 1.0
        found = base >= 0
        fx, fy = frac[:, 0], frac[:, 1]
        lower = fy <= fx
        tri[found] = base[found] + np.where(lower[found], 0, 1)
        bary = np.zeros((len(pts), 3))
        # lower (a, a+e1, a+e1+e2): weights (1-fx, fx-fy, fy)
        # upper (a, a+e1+e2, a+e2): weights (1-fy, fx, fy-fx)
        bary[:, 0] = np.where(lower, 1 - fx, 1 - fy)
        bary[:, 1] = np.where(lower, fx - fy, fx)
        bary[:, 2] = np.where(lower, fy, fy - fx)
        bary[~found] = 0.0
        return tri, bary

    def mapped(self, center: np.ndarray, factor: float) -> "Triangulation":
        """Image of the mesh under x -> center + factor * (x - center)."""
        center = np.asarray(center, dtype=float)
        return Triangulation(
            h=self.h * factor,
            origin=center + factor * (self.origin - center),
            nodes=center + factor * (self.nodes - center),
            node_grid=self.node_grid,
            triangles=self.triangles,
            tags=self.tags,
            node_site=self.node_site,
            _cell_lookup=self._cell_lookup,
            _cell_origin=self._cell_origin,
        )


def _bcast(mask: np.ndarray, like: np.ndarray) -> np.ndarray:
    return mask.reshape(mask.shape + (1,) * (like.ndim - 1))


def build_triangulation(lattice: Lattice) -> Triangulation:
    """Split each plaquette into its lower and upper right triangle."""
    if lattice.n_plaquettes == 0:
        raise GeometryError("lattice has no plaquettes to triangulate")
    pc = lattice.plaquette_corners
    used = np.unique(pc.ravel())
    node_of_site = np.full(lattice.n_sites, -1, dtype=np.int64)
    node_of_site[used] = np.arange(len(used))
    q = node_of_site[pc]
    lower = q[:, [0, 1, 2]]
    upper = q[:, [0, 2, 3]]
    tris = np.empty((2 * len(q), 3), dtype=np.int64)
    tris[0::2] = lower
    tris[1::2] = upper
    tags = np.tile(np.array([-1, 1]), len(q))

    cell_ij = lattice.ij[lattice.plaquettes]
    cx0, cy0 = cell_ij.min(axis=0)
    cx1, cy1 = cell_ij.max(axis=0)
    lookup = np.full((cx1 - cx0 + 1, cy1 - cy0 + 1), -1, dtype=np.int64)
    lookup[cell_ij[:, 0] - cx0, cell_ij[:, 1] - cy0] = 2 * np.arange(len(q))
    eps = lattice.epsilon
    return Triangulation(
        h=eps,
        origin=np.zeros(2),
        nodes=lattice.ij[used] * eps,
        node_grid=lattice.ij[used],
        triangles=tris,
        tags=tags,
        node_site=used,
        _cell_lookup=lookup,
        _cell_origin=(int(cx0), int(cy0)),
    )


def fem_mesh(geometry: DomainGeometry, h: float) -> Triangulation:
    """Triangulation of the closed grid cells of spacing ``h`` in the domain."""
    return build_triangulation(build_lattice(geometry, h, closed=True))
