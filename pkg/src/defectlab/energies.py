"""XY, screw-dislocation and Ginzburg-Landau energies and their log scalings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fields import ContinuumField, DisplacementField, SpinField
from .geometry import Predicate

FOUR_PI_SQ = 4 * math.pi**2
MODELS = ("GL", "XY", "SD")


@dataclass(frozen=True)
class ScalingRegime:
    """Energies of order |log eps|^h."""

    h: float = 1.0

    def __post_init__(self) -> None:
        if not self.h >= 1:
            raise ValueError("scaling exponent h must be >= 1")


@dataclass
class EnergyBreakdown:
    total: float
    contributions: np.ndarray = field(repr=False)
    gradient: float = 0.0
    potential: float = 0.0
    model: str = ""
    epsilon: float = float("nan")
    h: float = 1.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "gradient": self.gradient,
            "potential": self.potential,
            "model": self.model,
            "epsilon": self.epsilon,
            "h": self.h,
        }


def fsum(values: np.ndarray) -> float:
    return math.fsum(np.asarray(values, dtype=float).ravel().tolist())


def dist_to_int(t: np.ndarray) -> np.ndarray:
    return np.abs(t - np.round(t))


def xy_bond_terms(v: SpinField) -> np.ndarray:
    b = v.lattice.bonds
    diff = v.values[b[:, 0]] - v.values[b[:, 1]]
    return 0.5 * np.einsum("ij,ij->i", diff, diff)


def xy_energy(v: SpinField, region: Predicate | None = None) -> EnergyBreakdown:
    """(1/2) sum over bonds of |v(i) - v(j)|^2, bonds with both ends in ``region``."""
    terms = xy_bond_terms(v)
    terms = np.where(v.lattice.bond_region_mask(region), terms, 0.0)
    total = fsum(terms)
    return EnergyBreakdown(total, terms, gradient=total, model="XY", epsilon=v.lattice.epsilon)


def sd_bond_terms(u: DisplacementField) -> np.ndarray:
    b = u.lattice.bonds
    return 0.5 * dist_to_int(u.values[b[:, 1]] - u.values[b[:, 0]]) ** 2


def sd_energy(u: DisplacementField, region: Predicate | None = None) -> EnergyBreakdown:
    """(1/2) sum over bonds of dist^2(u(i) - u(j), Z)."""
    terms = sd_bond_terms(u)
    terms = np.where(u.lattice.bond_region_mask(region), terms, 0.0)
    total = fsum(terms)
    return EnergyBreakdown(total, terms, gradient=total, model="SD", epsilon=u.lattice.epsilon)


# Degree-5 rule on the reference triangle (barycentric coordinates, weights sum to 1).
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
_QUAD_BARY = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [_A1, _B1, _B1],
        [_B1, _A1, _B1],
        [_B1, _B1, _A1],
        [_A2, _B2, _B2],
        [_B2, _A2, _B2],
        [_B2, _B2, _A2],
    ]
)
_QUAD_W = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


def potential_density_lumped(w: ContinuumField) -> np.ndarray:
    """Per-node lumped mass times (1 - |w|)^2."""
    mod = np.linalg.norm(w.values, axis=1)
    return w.mesh.lumped_mass * (1.0 - mod) ** 2


def potential_per_triangle(w: ContinuumField) -> np.ndarray:
    """Per-triangle integral of (1 - |w|)^2 by a 7-point degree-5 rule."""
    vals = w.values[w.mesh.triangles]  # (T, 3, 2)
    pts = np.einsum("qk,tkc->tqc", _QUAD_BARY, vals)
    dens = (1.0 - np.linalg.norm(pts, axis=2)) ** 2
    return w.mesh.areas * (dens @ _QUAD_W)


def gl_energy(
    w: ContinuumField,
    epsilon: float,
    s: float = 1.0,
    region: Predicate | None = None,
    quadrature: str = "lumped",
) -> EnergyBreakdown:
    """(1/2) int |grad w|^2 + (s/eps^2) int (1 - |w|)^2.

    The gradient part is exact for P1 fields. The potential uses nodal mass
    lumping (``quadrature="lumped"``) or a 7-point rule per triangle
    (``"gauss"``). With a region, triangles are selected by centroid and lumped
    node masses by node position.
    """
    if not (s > 0 and epsilon > 0):
        raise ValueError("s and epsilon must be positive")
    mesh = w.mesh
    grad = w.gradient()
    grad_terms = 0.5 * mesh.areas * np.einsum("tcd,tcd->t", grad, grad)
    tri_mask = np.ones(mesh.n_triangles, bool) if region is None else region(mesh.centroids)
    grad_terms = np.where(tri_mask, grad_terms, 0.0)
    coef = s / epsilon**2
    if quadrature == "lumped":
        pot = potential_density_lumped(w)
        if region is not None:
            pot = np.where(region(mesh.nodes), pot, 0.0)
    elif quadrature == "gauss":
        pot = np.where(tri_mask, potential_per_triangle(w), 0.0)
    else:
        raise ValueError(f"unknown quadrature {quadrature!r}")
    gradient = fsum(grad_terms)
    potential = coef * fsum(pot)
    return EnergyBreakdown(
        gradient + potential,
        np.concatenate([grad_terms, coef * pot]),
        gradient=gradient,
        potential=potential,
        model="GL",
        epsilon=epsilon,
    )


def log_factor(epsilon: float, regime: ScalingRegime) -> float:
    if not 0 < epsilon < 1:
        raise ValueError("scaled energies need 0 < eps < 1")
    return abs(math.log(epsilon)) ** regime.h


def scaled_energy(model: str, raw: float, epsilon: float, regime: ScalingRegime) -> float:
    """raw / |log eps|^h, with the extra 4 pi^2 normalisation for SD."""
    model = model.upper()
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}")
    scale = FOUR_PI_SQ if model == "SD" else 1.0
    return scale * raw / log_factor(epsilon, regime)


def gl_rescale_map(epsilon: float, s1: float, s2: float) -> float:
    """delta = eps * sqrt(s2 / s1), so that s2 / delta^2 == s1 / eps^2."""
    if not (s1 > 0 and s2 > 0 and epsilon > 0):
        raise ValueError("need positive eps, s1, s2")
    return epsilon * math.sqrt(s2 / s1)
