"""Experiment runner: configs, eps sweeps, Gamma-limit oracles and the defectlab command line."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, stats

from .defects import DefectMeasure, discrete_strain_field, dislocation_measure, vorticity_measure
from .energies import FOUR_PI_SQ, MODELS, ScalingRegime, gl_energy, scaled_energy, sd_energy, xy_energy
from .fields import (
    DisplacementField,
    SpinField,
    read_field_csv,
    write_displacement_field,
    write_field_csv,
    write_spin_field,
)
from .flatnorm import flat_norm_atomic, flat_norm_grid
from .geometry import DomainGeometry, build_lattice, build_triangulation
from .solvers import (
    DefectPrescription,
    PrescriptionError,
    gl_minimize,
    sd_minimize,
    vortex_ansatz,
    write_trace,
    xy_minimize,
)

SWEEP_HEADER = [
    "model", "eps", "h", "raw_energy", "scaled_energy", "n_defects",
    "total_variation", "flat_drift", "iters", "wall_ms", "status",
]
H2_HEADER = [
    "eps", "n_defects", "raw_energy", "scaled_energy", "strain_l2sq",
    "oracle_self", "oracle_interaction", "oracle_total", "rel_gap", "status",
]
FAILURE_LIMIT = 0.2
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


class ConfigError(ValueError):
    """Invalid run configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# Fits


@dataclass
class FitResult:
    slope: float
    intercept: float
    slope_ci: float
    intercept_ci: float
    n: int

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "slope_ci": self.slope_ci,
            "intercept_ci": self.intercept_ci,
            "n": self.n,
        }


def linear_fit(x, y, level: float = 0.95) -> FitResult:
    """Least squares y = a x + b with Student-t half-widths from the residuals."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n < 2 or len(y) != n:
        raise ValueError("need at least two matching points")
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0:
        raise ValueError("x values are all equal")
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    if n < 3:
        return FitResult(slope, intercept, math.inf, math.inf, n)
    resid = y - (slope * x + intercept)
    s2 = float(np.sum(resid**2)) / (n - 2)
    q = float(stats.t.ppf(0.5 + level / 2, n - 2))
    se_a = math.sqrt(s2 / sxx)
    se_b = math.sqrt(s2 * (1.0 / n + xm * xm / sxx))
    return FitResult(slope, intercept, q * se_a, q * se_b, n)


# ---------------------------------------------------------------------------
# Gamma-limit oracles


def gamma_limit_oracle_h1(mu: DefectMeasure) -> float:
    """pi |mu|(Omega) for an atomic measure."""
    if not mu.is_atomic:
        raise ValueError("the h = 1 oracle takes atomic measures")
    return math.pi * mu.total_variation


@dataclass
class OracleH2:
    self_energy: float
    interaction: float

    @property
    def total(self) -> float:
        return self.self_energy + self.interaction


def oracle_strain(r, m: float, r1: float, r2: float):
    """|beta|(r) of the axisymmetric strain with curl beta = m on the inner disk."""
    r = np.asarray(r, dtype=float)
    inner = m * r / 2
    outer = m * r1 * r1 / (2 * np.maximum(r, 1e-300))
    return np.where(r <= r1, inner, np.where(r <= r2, outer, 0.0))


def gamma_limit_oracle_h2(m: float, r1: float, r2: float) -> OracleH2:
    """(1/4pi)|mu| + (1/2) int |beta|^2 for density m on the disk r1 inside the disk r2."""
    if not 0 < r1 < r2:
        raise ValueError("need 0 < r1 < r2")
    self_energy = abs(m) * math.pi * r1 * r1 / (4 * math.pi)
    interaction = (math.pi * m * m / 2) * (r1**4 / 8 + (r1**4 / 2) * math.log(r2 / r1))
    return OracleH2(self_energy, interaction)


def h2_interaction_quadrature(m: float, r1: float, r2: float) -> float:
    """(1/2) int |beta|^2 by adaptive 1D quadrature of the radial profile."""

    def f(r):
        return 0.5 * float(oracle_strain(r, m, r1, r2)) ** 2 * 2 * math.pi * r

    a, _ = integrate.quad(f, 0.0, r1, epsabs=1e-14, epsrel=1e-13)
    b, _ = integrate.quad(f, r1, r2, epsabs=1e-14, epsrel=1e-13)
    return a + b


def verified_oracle_h2(m: float, r1: float, r2: float, tol: float = 1e-8) -> OracleH2:
    oracle = gamma_limit_oracle_h2(m, r1, r2)
    quad = h2_interaction_quadrature(m, r1, r2)
    if abs(quad - oracle.interaction) > tol * max(1.0, abs(quad)):
        raise AssertionError(f"oracle closed form {oracle.interaction} vs quadrature {quad}")
    return oracle


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class RunConfig:
    domain: DomainGeometry
    models: list[str]
    eps: list[float]
    h: float = 1.0
    prescription: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    out: str = "."
    seed: int = 0
    workers: int = 1
    timing: bool = False
    schedule_prefactor: float = 1.0
    flat_resolution: float | None = None

    @property
    def regime(self) -> ScalingRegime:
        return ScalingRegime(self.h)

    def to_dict(self) -> dict:
        return {
            "domain": self.domain.to_dict(),
            "models": self.models,
            "eps": self.eps,
            "h": self.h,
            "prescription": self.prescription,
            "tolerances": self.tolerances,
            "out": self.out,
            "seed": self.seed,
            "workers": self.workers,
            "timing": self.timing,
            "schedule_prefactor": self.schedule_prefactor,
        }


def parse_eps(spec) -> list[float]:
    """A list of values, or {"k_min": a, "k_max": b} for 2^-a ... 2^-b."""
    if isinstance(spec, dict):
        try:
            k0, k1 = int(spec["k_min"]), int(spec["k_max"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad eps range {spec!r}") from exc
        if k1 < k0:
            raise ConfigError("k_max must be >= k_min")
        vals = [2.0**-k for k in range(k0, k1 + 1)]
    elif isinstance(spec, (list, tuple)):
        vals = [float(x) for x in spec]
    elif isinstance(spec, (int, float)):
        vals = [float(spec)]
    else:
        raise ConfigError(f"bad eps schedule {spec!r}")
    if not vals:
        raise ConfigError("empty eps schedule")
    if any(not 0 < e < 1 for e in vals):
        raise ConfigError("eps values must lie in (0, 1)")
    if any(b >= a for a, b in zip(vals, vals[1:])):
        raise ConfigError("eps schedule must be strictly decreasing")
    return vals


def load_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    try:
        domain = DomainGeometry.from_dict(data.get("domain", {"kind": "square"}))
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad domain: {exc}") from exc
    models = data.get("models", data.get("model", ["XY"]))
    if isinstance(models, str):
        models = [models]
    models = [str(m).upper() for m in models]
    bad = [m for m in models if m not in MODELS]
    if bad:
        raise ConfigError(f"unknown models {bad}")
    if "eps" not in data:
        raise ConfigError("missing eps schedule")
    eps = parse_eps(data["eps"])
    try:
        h = float(data.get("h", 1.0))
        ScalingRegime(h)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    pres = data.get("prescription", {"atoms": []})
    if not isinstance(pres, dict):
        raise ConfigError("prescription must be an object")
    workers = int(data.get("workers", 1))
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    prefactor = float(data.get("schedule_prefactor", 1.0))
    if prefactor <= 0:
        raise ConfigError("schedule_prefactor must be positive")
    return RunConfig(
        domain=domain,
        models=models,
        eps=eps,
        h=h,
        prescription=pres,
        tolerances=dict(data.get("tolerances", {})),
        out=str(data.get("out", ".")),
        seed=int(data.get("seed", 0)),
        workers=workers,
        timing=bool(data.get("timing", False)),
        schedule_prefactor=prefactor,
        flat_resolution=data.get("flat_resolution"),
    )


def read_config(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# Prescriptions


def spiral_points(n: int, center, radius: float) -> np.ndarray:
    """Vogel spiral: n quasi-uniform points in a disk."""
    k = np.arange(n)
    r = radius * np.sqrt((k + 0.5) / max(n, 1))
    th = k * GOLDEN_ANGLE
    return np.column_stack([center[0] + r * np.cos(th), center[1] + r * np.sin(th)])


def snap_separated(lattice, points: np.ndarray, min_sep: float) -> np.ndarray:
    """Plaquette centers nearest to ``points``, pairwise at least ``min_sep`` apart.

    Points are placed in order; a point whose nearest center is taken or too
    close to an earlier one moves to the nearest free center.
    """
    centers = lattice.plaquette_centers
    chosen: list[np.ndarray] = []
    for p in points:
        d2 = np.sum((centers - p) ** 2, axis=1)
        own = lattice.plaquette_of(p[None])
        cand = np.argsort(d2, kind="stable")
        if own[0] >= 0:
            cand = np.concatenate([own, cand])
        for q in cand:
            c = centers[q]
            if all(np.hypot(*(c - o)) >= min_sep - 1e-12 for o in chosen):
                chosen.append(c)
                break
        else:
            raise PrescriptionError("no free plaquette left for a defect")
    return np.array(chosen).reshape(-1, 2)


def uniform_disk_count(spec: dict, eps: float) -> int:
    """N_eps = round(c |log eps|)."""
    return int(round(float(spec.get("c", 1.0)) * abs(math.log(eps))))


def build_prescription(spec: dict, lattice, regime: ScalingRegime) -> DefectPrescription:
    """Explicit atoms [[x, y, d], ...] or a "uniform-disk" rule, snapped to the lattice."""
    kind = spec.get("kind", "atoms")
    eps = lattice.epsilon
    if kind == "atoms":
        atoms = np.asarray(spec.get("atoms", []), dtype=float).reshape(-1, 3)
        if not len(atoms):
            return DefectPrescription.empty(regime)
        pts = snap_separated(lattice, atoms[:, :2], eps)
        return DefectPrescription(pts, atoms[:, 2].astype(np.int64), regime)
    if kind == "uniform-disk":
        n = uniform_disk_count(spec, eps)
        if n == 0:
            return DefectPrescription.empty(regime)
        center = spec.get("center", lattice.geometry.center.tolist())
        pts = spiral_points(n, center, float(spec["radius"]))
        pts = snap_separated(lattice, pts, 2 * eps)
        return DefectPrescription(pts, np.full(n, int(spec.get("degree", 1))), regime)
    raise ConfigError(f"unknown prescription kind {kind!r}")


# ---------------------------------------------------------------------------
# Sweeps


@dataclass
class SweepRow:
    model: str
    eps: float
    h: float
    raw_energy: float
    scaled_energy: float
    n_defects: int
    total_variation: float
    flat_drift: float
    iters: int
    wall_ms: float
    status: str

    def values(self) -> list:
        return [
            self.model, repr(self.eps), repr(self.h), repr(self.raw_energy),
            repr(self.scaled_energy), self.n_defects, repr(self.total_variation),
            repr(self.flat_drift), self.iters, repr(self.wall_ms), self.status,
        ]


@dataclass
class RunReport:
    rows: list[SweepRow]
    fits: dict[str, FitResult | None]
    failures: int

    @property
    def failure_fraction(self) -> float:
        return self.failures / max(len(self.rows), 1)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in self.rows:
            w.writerow(r.values())
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "fits": {m: (f.to_dict() if f else None) for m, f in self.fits.items()},
            "failures": self.failures,
            "n_rows": len(self.rows),
        }


def solve_model(
    model: str, prescription: DefectPrescription, geometry: DomainGeometry, eps: float, tol: dict, trace: bool = False
):
    """Run one minimizer and return (field, report, raw energy)."""
    if model == "GL":
        w, rep = gl_minimize(
            prescription, geometry, eps,
            mesh_size=tol.get("gl_mesh_factor", 0.5) * eps,
            max_iter=int(tol.get("gl_max_iter", 2000)),
            trace=trace,
        )
        return w, rep, rep.energy
    lattice = build_lattice(geometry, eps)
    if model == "XY":
        v, rep = xy_minimize(
            prescription, lattice,
            max_iter=int(tol.get("xy_max_iter", 100_000)),
            grad_tol=float(tol.get("xy_grad_tol", 1e-8)),
            trace=trace,
        )
        return v, rep, rep.energy
    u, rep = sd_minimize(prescription, lattice, max_sweeps=int(tol.get("sd_max_sweeps", 1000)), trace=trace)
    return u, rep, rep.energy


def sweep_point(args) -> SweepRow:
    model, eps, cfg_dict = args
    cfg = load_config(cfg_dict)
    regime = cfg.regime
    t0 = time.perf_counter()
    lattice = build_lattice(cfg.domain, eps)
    try:
        pres = build_prescription(cfg.prescription, lattice, regime)
        _, rep, raw = solve_model(model, pres, cfg.domain, eps, cfg.tolerances)
        status = "ok" if rep.success else "failed"
        iters = rep.iterations
    except (PrescriptionError, RuntimeError, ValueError) as exc:
        return SweepRow(model, eps, cfg.h, math.nan, math.nan, 0, math.nan, math.nan, 0, 0.0, f"failed: {exc}")
    norm = abs(math.log(eps)) ** (cfg.h - 1)
    achieved = rep.achieved
    target = pres.measure(cfg.domain)
    if achieved is not None and achieved.is_atomic:
        drift = flat_norm_atomic(achieved - target).value / norm
        n_def = achieved.merged().n_atoms
        tv = achieved.total_variation / norm
    else:
        drift, n_def, tv = math.nan, 0, math.nan
    wall = 1e3 * (time.perf_counter() - t0) if cfg.timing else 0.0
    return SweepRow(
        model, eps, cfg.h, raw, scaled_energy(model, raw, eps, regime), n_def, tv, drift, iters, wall, status
    )


def _fit_rows(rows: list[SweepRow], model: str) -> FitResult | None:
    ok = [r for r in rows if r.model == model and r.status == "ok"]
    if len(ok) < 4:
        return None
    energy = [FOUR_PI_SQ * r.raw_energy if model == "SD" else r.raw_energy for r in ok]
    return linear_fit([math.log(1 / r.eps) for r in ok], energy)


def run_sweep(config: RunConfig, out: str | Path | None = None) -> RunReport:
    """Solve every (model, eps) pair, write sweep.csv, fits.json and plot data."""
    tasks = [(m, e, config.to_dict()) for m in config.models for e in config.eps]
    if config.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(sweep_point, tasks))
    else:
        rows = [sweep_point(t) for t in tasks]
    fits = {m: _fit_rows(rows, m) for m in config.models}
    report = RunReport(rows, fits, sum(r.status != "ok" for r in rows))
    if out is not None:
        write_sweep_outputs(report, Path(out))
    return report


def atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_sweep_outputs(report: RunReport, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "sweep.csv", report.csv_text())
    atomic_write(out / "fits.json", json.dumps(report.to_dict(), indent=2, sort_keys=True))
    for model, fit in report.fits.items():
        pts = [r for r in report.rows if r.model == model and r.status == "ok"]
        lines = [f"{math.log(1 / r.eps)!r} {(FOUR_PI_SQ if model == 'SD' else 1.0) * r.raw_energy!r}" for r in pts]
        atomic_write(out / f"{model.lower()}_energy.dat", "\n".join(lines) + "\n")
        script = [
            f"# energy vs log(1/eps), model {model}",
            f"plot '{model.lower()}_energy.dat' using 1:2 with points title '{model}'",
        ]
        if fit is not None:
            script.append(f"replot {fit.slope!r}*x + {fit.intercept!r} title 'fit'")
        atomic_write(out / f"plot_{model.lower()}.txt", "\n".join(script) + "\n")


# ---------------------------------------------------------------------------
# h = 2 experiment


@dataclass
class H2Row:
    eps: float
    n_defects: int
    raw_energy: float
    scaled_energy: float
    strain_l2sq: float
    oracle: OracleH2
    status: str

    @property
    def rel_gap(self) -> float:
        return abs(self.scaled_energy - self.oracle.total) / self.oracle.total if self.oracle.total else 0.0

    def values(self) -> list:
        return [
            repr(self.eps), self.n_defects, repr(self.raw_energy), repr(self.scaled_energy),
            repr(self.strain_l2sq), repr(self.oracle.self_energy), repr(self.oracle.interaction),
            repr(self.oracle.total), repr(self.rel_gap), self.status,
        ]


def h2_point(eps: float, domain: DomainGeometry, spec: dict) -> H2Row:
    """SD minimisation with N = round(c |log eps|) defects of degree +1."""
    r1 = float(spec["radius"])
    r2 = float(spec.get("outer_radius", domain.d))
    log = abs(math.log(eps))
    lattice = build_lattice(domain, eps)
    pres = build_prescription({**spec, "kind": "uniform-disk"}, lattice, ScalingRegime(2.0))
    n = len(pres)
    m = n / (log * math.pi * r1 * r1)
    oracle = verified_oracle_h2(m, r1, r2)
    if n == 0:
        return H2Row(eps, 0, 0.0, 0.0, 0.0, oracle, "ok")
    u, rep = sd_minimize(pres, lattice)
    raw = rep.energy
    beta = discrete_strain_field(u)
    mesh = build_triangulation(lattice)
    strain = float(np.sum(mesh.areas * np.sum(beta**2, axis=1))) / log**2
    return H2Row(eps, n, raw, raw / log**2, strain, oracle, "ok" if rep.success else "failed")


def h2_experiment(config: RunConfig, out: str | Path | None = None) -> list[H2Row]:
    spec = dict(config.prescription)
    spec.setdefault("radius", config.domain.d / 2)
    rows = [h2_point(e, config.domain, spec) for e in config.eps]
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(H2_HEADER)
        for r in rows:
            w.writerow(r.values())
        atomic_write(out / "h2.csv", buf.getvalue())
    return rows


# ---------------------------------------------------------------------------
# Command line


def _geometry_and_eps(data: dict) -> tuple[DomainGeometry, float]:
    cfg = load_config({**data, "eps": data.get("eps", 0.0625)})
    if len(cfg.eps) != 1:
        raise ConfigError("this subcommand takes a single eps")
    return cfg.domain, cfg.eps[0]


def _load_state(data: dict, model: str, geometry: DomainGeometry, eps: float):
    lattice = build_lattice(geometry, eps)
    if "field" in data:
        pts, vals, _ = read_field_csv(data["field"])
        idx = lattice.site_index(np.rint(pts / eps).astype(np.int64))
        if np.any(idx < 0) or len(idx) != lattice.n_sites:
            raise ConfigError("field file does not match the lattice")
        order = np.empty(lattice.n_sites, dtype=np.int64)
        order[idx] = np.arange(len(idx))
        vals = vals[order]
        if model == "SD":
            return DisplacementField(lattice, vals[:, 0])
        return SpinField(lattice, vals[:, :2])
    pres = build_prescription(data.get("prescription", {"atoms": []}), lattice, ScalingRegime())
    v = vortex_ansatz(pres, lattice)
    if model == "SD":
        from .fields import phase_of

        return phase_of(v)
    return v


def cmd_energy(data: dict, out: Path) -> int:
    geometry, eps = _geometry_and_eps(data)
    model = str(data.get("model", "XY")).upper()
    regime = ScalingRegime(float(data.get("h", 1.0)))
    if model == "GL":
        from .fields import interpolate_pl

        state = interpolate_pl(_load_state(data, "XY", geometry, eps))
        br = gl_energy(state, eps)
    elif model in ("XY", "SD"):
        state = _load_state(data, model, geometry, eps)
        br = xy_energy(state) if model == "XY" else sd_energy(state)
    else:
        raise ConfigError(f"unknown model {model!r}")
    res = {**br.to_dict(), "scaled": scaled_energy(model, br.total, eps, regime)}
    atomic_write(out / "energy.json", json.dumps(res, indent=2, sort_keys=True))
    print(json.dumps(res, sort_keys=True))
    return 0


def cmd_defects(data: dict, out: Path) -> int:
    geometry, eps = _geometry_and_eps(data)
    model = str(data.get("model", "XY")).upper()
    if model not in ("XY", "SD"):
        raise ConfigError("defects works on XY or SD fields")
    state = _load_state(data, model, geometry, eps)
    mu = vorticity_measure(state) if model == "XY" else dislocation_measure(state)
    atomic_write(out / "defects.json", mu.to_json())
    print(mu.to_json())
    return 0


def cmd_minimize(data: dict, out: Path) -> int:
    geometry, eps = _geometry_and_eps(data)
    model = str(data.get("model", "XY")).upper()
    lattice = build_lattice(geometry, eps)
    pres = build_prescription(data.get("prescription", {"atoms": []}), lattice, ScalingRegime(float(data.get("h", 1.0))))
    state, rep, _ = solve_model(model, pres, geometry, eps, data.get("tolerances", {}), bool(data.get("trace")))
    if model == "XY":
        write_spin_field(out / "field.csv", state)
    elif model == "SD":
        write_displacement_field(out / "field.csv", state)
    else:
        write_field_csv(out / "field.csv", state.mesh.nodes, state.values, {"field": "gl", "epsilon": eps})
    if data.get("trace"):
        write_trace(out / "trace.csv", rep.trace)
    atomic_write(out / "report.json", json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    print(json.dumps({"energy": rep.energy, "success": rep.success}))
    return 0 if rep.success else 3


def cmd_convert(data: dict, out: Path) -> int:
    from . import equivalence as eq

    geometry, eps = _geometry_and_eps(data)
    regime = ScalingRegime(float(data.get("h", 1.0)))
    conv = str(data.get("conversion", "SD->XY")).upper().replace(" ", "")
    src = conv.split("->")[0]
    lattice = build_lattice(geometry, eps)
    pres = build_prescription(data.get("prescription", {"atoms": []}), lattice, regime)
    state, _, _ = solve_model(src, pres, geometry, eps, data.get("tolerances", {}))
    pf = float(data.get("schedule_prefactor", 1.0))
    if conv == "GL->XY":
        _, audit = eq.gl_to_xy(state, eps, regime, geometry, prefactor=pf)
    elif conv == "XY->SD":
        _, audit = eq.xy_to_sd(state, eps, regime, geometry, prefactor=pf)
    elif conv == "SD->XY":
        _, audit = eq.sd_to_xy(state, eps, regime)
    elif conv == "XY->GL":
        _, audit = eq.xy_to_gl(state, eps, regime)
    else:
        raise ConfigError(f"unknown conversion {conv!r}")
    eq.write_audit_csv(out / "audit.csv", [audit])
    atomic_write(out / "audit.json", json.dumps(audit.to_dict(), indent=2, sort_keys=True))
    print(json.dumps({"gap": audit.gap, "drift": audit.drift}))
    return 0


def cmd_flatnorm(data: dict, out: Path) -> int:
    try:
        geometry = DomainGeometry.from_dict(data.get("domain", {"kind": "square"}))
        atoms = np.asarray(data.get("atoms", []), dtype=float).reshape(-1, 3)
        mu = DefectMeasure(geometry, atoms[:, :2], atoms[:, 2])
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    method = data.get("method", "atomic")
    if method == "atomic":
        res = flat_norm_atomic(mu, convention=data.get("convention", "max"))
    elif method == "grid":
        res = flat_norm_grid(mu, resolution=float(data.get("resolution", 1 / 64)))
    else:
        raise ConfigError(f"unknown method {method!r}")
    atomic_write(out / "flatnorm.json", json.dumps(res.to_dict(), indent=2, sort_keys=True))
    print(json.dumps({"value": res.value, "method": res.method}))
    return 0


def cmd_sweep(data: dict, out: Path, workers: int | None) -> int:
    cfg = load_config(data)
    if workers is not None:
        cfg.workers = workers
    report = run_sweep(cfg, out)
    for model, fit in report.fits.items():
        if fit is not None:
            print(f"{model}: slope {fit.slope:.6f} +- {fit.slope_ci:.6f}")
    return 3 if report.failure_fraction > FAILURE_LIMIT else 0


def cmd_h2(data: dict, out: Path) -> int:
    cfg = load_config({**data, "models": ["SD"], "h": data.get("h", 2.0)})
    rows = h2_experiment(cfg, out)
    for r in rows:
        print(f"eps={r.eps:.6g} N={r.n_defects} scaled={r.scaled_energy:.6f} oracle={r.oracle.total:.6f}")
    failed = sum(r.status != "ok" for r in rows)
    return 3 if failed > FAILURE_LIMIT * max(len(rows), 1) else 0


COMMANDS = ("energy", "defects", "minimize", "convert", "flatnorm", "sweep", "h2")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="defectlab", description=__doc__)
    p.add_argument("subcommand", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--workers", type=int, default=None, help="parallel sweep points")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        data = read_config(args.config)
        out = Path(args.out or data.get("out", "."))
        out.mkdir(parents=True, exist_ok=True)
        if args.subcommand == "sweep":
            return cmd_sweep(data, out, args.workers)
        handler = {
            "energy": cmd_energy,
            "defects": cmd_defects,
            "minimize": cmd_minimize,
            "convert": cmd_convert,
            "flatnorm": cmd_flatnorm,
            "h2": cmd_h2,
        }[args.subcommand]
        return handler(data, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PrescriptionError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
