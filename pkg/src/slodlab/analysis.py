"""Error norms, convergence tables, localization-decay fits, and stability reports."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import fem, solvers
from .basis import build_basis
from .mesh import build_grid, build_nesting


@dataclass
class ErrorReport:
    """L2, H1-seminorm and epsilon-norm distances between two fine-grid functions."""

    l2_error: float
    h1_semi_error: float
    eps_norm_error: float
    config: dict = field(default_factory=dict)


@dataclass
class DecayFit:
    """Least-squares fit of log(error) = log(C1) - C2 * ell^(d/(d-1))."""

    exponent_base: float
    amplitude: float
    rate: float
    fit_residual: float
    points: list
    non_decaying: bool


@lru_cache(maxsize=8)
def _norm_matrices(dim, n):
    grid = build_grid(dim, n)
    problem = fem.assemble(grid, 1.0, fem.constant_velocity(np.zeros(dim)))
    return problem.mass_full, problem.stiffness_full


def error_norms(reference, approx, epsilon, fine_grid, config=None):
    """Measure the difference of two full fine nodal vectors in the analysis norms."""
    reference = np.asarray(reference, dtype=float)
    approx = np.asarray(approx, dtype=float)
    if reference.shape != approx.shape or reference.shape != (fine_grid.node_count,):
        raise ValueError(
            f"vector shapes {reference.shape}, {approx.shape} do not match grid "
            f"({fine_grid.node_count} nodes)"
        )
    mass, stiffness = _norm_matrices(fine_grid.dim, fine_grid.cells_per_axis)
    diff = reference - approx
    l2 = float(np.sqrt(max(diff @ (mass @ diff), 0.0)))
    h1 = float(np.sqrt(max(diff @ (stiffness @ diff), 0.0)))
    return ErrorReport(
        l2_error=l2,
        h1_semi_error=h1,
        eps_norm_error=float(np.sqrt(epsilon * h1**2 + l2**2)),
        config=dict(config or {}),
    )


# ---------------------------------------------------------------------------
# studies


@dataclass
class StudyRow:
    method: str
    dim: int
    epsilon: float
    coarse_size: float      # H
    fine_size: float        # h
    ell: object             # int or None for single-scale methods
    p: float
    p_w: float
    l2_error: float
    h1_semi_error: float
    eps_norm_error: float
    sigma: object           # float or None
    runtime_seconds: float


@dataclass
class StudyResult:
    rows: list
    slopes: dict
    failures: list

    def row_dicts(self):
        return [vars(r) for r in self.rows]


SLOD_METHODS = ("slod", "slod_galerkin", "collocation")
SINGLE_SCALE_METHODS = ("fem", "supg", "ideal", "reference")
ALL_METHODS = SLOD_METHODS + SINGLE_SCALE_METHODS


def _default_basis_provider(dim, fine_n, epsilon, velocity, p, p_w, workers,
                            allow_full_domain):
    def provider(coarse_n, ell):
        return build_basis(
            build_grid(dim, coarse_n), build_grid(dim, fine_n), epsilon, velocity,
            ell, p=p, p_w=p_w, workers=workers, allow_full_domain=allow_full_domain,
        )
    return provider


def convergence_study(dim, epsilon, velocity, f, fine_n, coarse_ns, methods,
                      ells=(1,), p=1.5, p_w=2.0, workers=1, basis_provider=None,
                      allow_full_domain=False, quadrature_refinement=4):
    """Run the requested methods over a coarse-size sweep against one fine reference.

    Returns per-run error rows plus least-squares convergence slopes of the L2
    error per (method, ell) group. Failures are recorded per cell and do not
    abort the sweep.
    """
    unknown = set(methods) - set(ALL_METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}; allowed: {ALL_METHODS}")
    fine = build_grid(dim, fine_n)
    velocity_obj = velocity
    fine_problem = fem.assemble(fine, epsilon, velocity_obj)
    reference = solvers.solve_reference(fine, epsilon, velocity_obj, f,
                                        fine_problem=fine_problem)
    if basis_provider is None:
        basis_provider = _default_basis_provider(
            dim, fine_n, epsilon, velocity_obj, p, p_w, workers, allow_full_domain)

    rows, failures = [], []
    h = fine.mesh_size

    def record(method, coarse_n, ell, sigma_val, runtime, solution):
        report = error_norms(reference.fine_representation,
                             solution.fine_representation, epsilon, fine)
        rows.append(StudyRow(
            method=method, dim=dim, epsilon=epsilon, coarse_size=1.0 / coarse_n,
            fine_size=h, ell=ell, p=p, p_w=p_w,
            l2_error=report.l2_error, h1_semi_error=report.h1_semi_error,
            eps_norm_error=report.eps_norm_error, sigma=sigma_val,
            runtime_seconds=runtime,
        ))

    for coarse_n in coarse_ns:
        coarse = build_grid(dim, coarse_n)
        nesting = build_nesting(coarse, fine)
        for method in methods:
            if method in SINGLE_SCALE_METHODS:
                start = time.perf_counter()
                try:
                    if method == "fem":
                        sol = solvers.solve_fem(coarse, epsilon, velocity_obj, f, nesting)
                    elif method == "supg":
                        sol = solvers.solve_supg(coarse, epsilon, velocity_obj, f,
                                                 nesting=nesting)
                    elif method == "ideal":
                        sol = solvers.solve_ideal(coarse, fine, epsilon, velocity_obj, f,
                                                  nesting=nesting, fine_problem=fine_problem)
                    else:
                        sol = reference
                    record(method, coarse_n, None, None, time.perf_counter() - start, sol)
                except Exception as exc:  # noqa: BLE001 - recorded per cell
                    failures.append({"method": method, "coarse_n": coarse_n,
                                     "ell": None, "error": repr(exc)})
        slod_requested = [m for m in methods if m in SLOD_METHODS]
        if not slod_requested:
            continue
        for ell in ells:
            start_basis = time.perf_counter()
            try:
                basis = basis_provider(coarse_n, ell)
            except Exception as exc:  # noqa: BLE001 - recorded per cell
                for method in slod_requested:
                    failures.append({"method": method, "coarse_n": coarse_n,
                                     "ell": ell, "error": repr(exc)})
                continue
            basis_time = time.perf_counter() - start_basis
            for method in slod_requested:
                start = time.perf_counter()
                try:
                    if method == "slod":
                        sol = solvers.solve_slod(
                            basis, f, mode="projected", velocity=velocity_obj,
                            fine_problem=fine_problem, nesting=nesting,
                            quadrature_refinement=quadrature_refinement)
                    elif method == "slod_galerkin":
                        sol = solvers.solve_slod(
                            basis, f, mode="unprojected", velocity=velocity_obj,
                            fine_problem=fine_problem, nesting=nesting,
                            quadrature_refinement=quadrature_refinement)
                    else:
                        sol = solvers.solve_collocation(
                            basis, f, quadrature_refinement=quadrature_refinement)
                    record(method, coarse_n, ell, basis.sigma(),
                           time.perf_counter() - start + basis_time, sol)
                except Exception as exc:  # noqa: BLE001 - recorded per cell
                    failures.append({"method": method, "coarse_n": coarse_n,
                                     "ell": ell, "error": repr(exc)})

    return StudyResult(rows=rows, slopes=_fit_slopes(rows), failures=failures)


def _fit_slopes(rows):
    groups = {}
    for row in rows:
        groups.setdefault((row.method, row.ell), []).append(row)
    slopes = {}
    for key, group in groups.items():
        pts = [(r.coarse_size, r.l2_error) for r in group if r.l2_error > 0.0]
        if len(pts) < 2:
            slopes[key] = None
            continue
        pts.sort()
        logh = np.log([p[0] for p in pts])
        loge = np.log([p[1] for p in pts])
        slopes[key] = float(np.polyfit(logh, loge, 1)[0])
    return slopes


# ---------------------------------------------------------------------------
# localization decay


def fit_decay(ells, errors, dim):
    """Fit errors over the oversampling level to the super-exponential model."""
    if dim < 2:
        raise ValueError("one-dimensional bases are exactly local; no decay to fit")
    pts = sorted(zip([int(e) for e in ells], [float(v) for v in errors]))
    positive = [(l, v) for l, v in pts if v > 0.0]
    if len(positive) < 3:
        raise ValueError(f"need at least 3 positive decay points, got {len(positive)}")
    exponent = dim / (dim - 1.0)
    x = np.asarray([l**exponent for l, _ in positive])
    y = np.log([v for _, v in positive])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return DecayFit(
        exponent_base=exponent,
        amplitude=float(np.exp(intercept)),
        rate=float(-slope),
        fit_residual=float(np.sqrt(np.mean(resid**2))),
        points=pts,
        non_decaying=bool(-slope <= 0.0),
    )


def localization_decay(dim, epsilon, velocity, f, fine_n, coarse_n, ells,
                       p=1.5, p_w=2.0, workers=1, basis_provider=None,
                       allow_full_domain=False):
    """Measure the H1-seminorm error of the localized method over an ell sweep
    at fixed coarse size and fit the super-exponential decay model."""
    if len(ells) < 3:
        raise ValueError("need at least 3 oversampling levels")
    fine = build_grid(dim, fine_n)
    coarse = build_grid(dim, coarse_n)
    nesting = build_nesting(coarse, fine)
    fine_problem = fem.assemble(fine, epsilon, velocity)
    reference = solvers.solve_reference(fine, epsilon, velocity, f,
                                        fine_problem=fine_problem)
    if basis_provider is None:
        basis_provider = _default_basis_provider(
            dim, fine_n, epsilon, velocity, p, p_w, workers, allow_full_domain)
    points = []
    for ell in ells:
        basis = basis_provider(coarse_n, ell)
        sol = solvers.solve_slod(basis, f, velocity=velocity,
                                 fine_problem=fine_problem, nesting=nesting)
        report = error_norms(reference.fine_representation, sol.fine_representation,
                             epsilon, fine)
        points.append((int(ell), report.h1_semi_error))
    fit = fit_decay([p_ for p_, _ in points], [v for _, v in points], dim)
    return fit, points


# ---------------------------------------------------------------------------
# stability reports


def eigen_decay_report(basis):
    """Sorted flux-Gram eigenvalues per patch, flattened for plotting."""
    rows = []
    for entry in basis.entries:
        for i, lam in enumerate(np.sort(entry.spectrum)):
            rows.append({"center_element": entry.center_element, "index": i,
                         "eigenvalue": float(lam)})
    return rows


def riesz_report(basis):
    """Extremal singular values of the coarse source matrix (basis stability)."""
    G = basis.source_matrix
    n = G.shape[0]
    if n > 8192:
        raise ValueError(f"source matrix of size {n} too large for a dense SVD report")
    svals = np.linalg.svd(G.toarray(), compute_uv=False)
    s_max, s_min = float(svals[0]), float(svals[-1])
    return {
        "sigma_min": s_min,
        "sigma_max": s_max,
        "ratio": s_max / s_min if s_min > 0 else np.inf,
        "flagged": bool(s_min < 1e-8 * s_max),
    }


# ---------------------------------------------------------------------------
# CSV output


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


CONVERGENCE_COLUMNS = ("method", "dim", "epsilon", "H", "h", "ell", "p", "pw",
                       "l2_error", "h1_semi_error", "eps_norm_error", "sigma",
                       "runtime_seconds")


def write_convergence_csv(rows, path):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CONVERGENCE_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(v) for v in (
                row.method, row.dim, row.epsilon, row.coarse_size, row.fine_size,
                row.ell, row.p, row.p_w, row.l2_error, row.h1_semi_error,
                row.eps_norm_error, row.sigma, row.runtime_seconds)])


def write_decay_csv(fit, path):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(("C1", "C2", "exponent", "fit_residual"))
        writer.writerow([_fmt(v) for v in
                         (fit.amplitude, fit.rate, fit.exponent_base, fit.fit_residual)])


def write_decay_points_csv(points, path):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(("ell", "error"))
        for ell, err in points:
            writer.writerow([_fmt(ell), _fmt(err)])


def write_vertex_csv(grid, values, path):
    """Value dump: one row per fine node with id, coordinates and value."""
    values = np.asarray(values)
    coords = grid.box.node_coords()
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(("node",) + tuple(f"x{a}" for a in range(grid.dim)) + ("value",))
        for i in range(grid.node_count):
            writer.writerow([_fmt(int(i))] + [_fmt(float(c)) for c in coords[i]]
                            + [_fmt(float(values[i]))])


def write_element_csv(grid, values, path):
    """Value dump for piecewise-constant data: element id, midpoint, value."""
    values = np.asarray(values)
    mids = grid.box.element_midpoints()
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(("element",) + tuple(f"x{a}" for a in range(grid.dim)) + ("value",))
        for i in range(grid.element_count):
            writer.writerow([_fmt(int(i))] + [_fmt(float(c)) for c in mids[i]]
                            + [_fmt(float(values[i]))])


def write_eigen_csv(rows, path):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(("center_element", "index", "eigenvalue"))
        for row in rows:
            writer.writerow([_fmt(row["center_element"]), _fmt(row["index"]),
                             _fmt(row["eigenvalue"])])


def write_riesz_csv(report, path):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(("sigma_min", "sigma_max", "ratio", "flagged"))
        writer.writerow([_fmt(report["sigma_min"]), _fmt(report["sigma_max"]),
                         _fmt(report["ratio"]), str(report["flagged"]).lower()])
