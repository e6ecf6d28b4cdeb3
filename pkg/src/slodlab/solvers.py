"""Coarse-scale solution methods and the fine reference solve.

All methods return a CoarseSolution whose fine_representation lives on the
fine grid, so errors of different methods are measured in the same space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as spla

from . import fem
from .mesh import build_nesting
from .projection import P0Function, ideal_solve, p0_load, project_P0

# Dense factorization limit for the coarse system.
COARSE_DENSE_LIMIT = 20_000
COND_ESTIMATE_LIMIT = 2048


@dataclass
class CoarseSolution:
    """Solution of one method: coarse coefficients plus its fine-grid realization."""

    method: str
    coefficients: np.ndarray
    fine_representation: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _cond_estimate(S):
    if min(S.shape) == 0:
        return None
    if S.shape[0] <= COND_ESTIMATE_LIMIT:
        return float(np.linalg.cond(S))
    return None


def _check_finite(solution):
    if not np.all(np.isfinite(solution.fine_representation)):
        raise fem.SolverError(f"{solution.method} produced non-finite values")
    return solution


def _velocity_of(basis, velocity):
    if velocity is not None:
        return velocity
    return fem.velocity_from_descriptor(basis.velocity_descriptor)


def solve_slod(basis, f, mode="projected", velocity=None, fine_problem=None,
               nesting=None, quadrature_refinement=4):
    """Galerkin solve in the span of the localized basis functions.

    In "projected" mode the right-hand side is the coarse piecewise-constant
    projection of f; in "unprojected" mode f itself is tested against the
    basis (better for smooth data).
    """
    if mode not in ("projected", "unprojected"):
        raise ValueError(f"unknown mode {mode!r}")
    velocity = _velocity_of(basis, velocity)
    coarse, fine = basis.coarse_grid, basis.fine_grid
    if nesting is None:
        nesting = build_nesting(coarse, fine)
    if fine_problem is None:
        fine_problem = fem.assemble(fine, basis.epsilon, velocity)
    free = fine_problem.free_nodes
    phi = basis.phi_matrix
    phi_free = phi[free]
    n = phi.shape[1]
    if n > COARSE_DENSE_LIMIT:
        raise fem.SolverError(f"coarse system of size {n} exceeds the dense limit")

    S = (phi_free.T @ (fine_problem.matrix @ phi_free)).toarray()
    if mode == "projected":
        p0 = project_P0(f, coarse, quadrature_refinement)
        load_full = p0_load(fine, nesting, p0, full=True)
    else:
        load_full = fem.general_load(fine, f, full=True)
    rhs = phi_free.T @ load_full[free]

    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0.0:
        coeff = np.zeros(n)
        residual = 0.0
    else:
        try:
            lu, piv = scipy.linalg.lu_factor(S)
            coeff = scipy.linalg.lu_solve((lu, piv), rhs)
            for _ in range(5):
                r = rhs - S @ coeff
                residual = np.linalg.norm(r) / rhs_norm
                if residual <= fem.SOLVE_TOL:
                    break
                coeff = coeff + scipy.linalg.lu_solve((lu, piv), r)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as exc:
            raise fem.SolverError(
                f"singular coarse system (cond estimate {_cond_estimate(S)})"
            ) from exc
        residual = np.linalg.norm(S @ coeff - rhs) / rhs_norm
        if not np.all(np.isfinite(coeff)) or residual > fem.SOLVE_TOL:
            raise fem.SolverError(
                f"coarse solve residual {residual:.3e} exceeds {fem.SOLVE_TOL} "
                f"(cond estimate {_cond_estimate(S)})",
                residual,
            )
    return _check_finite(CoarseSolution(
        method="slod" if mode == "projected" else "slod_galerkin",
        coefficients=coeff,
        fine_representation=np.asarray(phi @ coeff),
        diagnostics={
            "condition_estimate": _cond_estimate(S),
            "coarse_residual": residual,
            "sigma": basis.sigma(),
        },
    ))


def solve_collocation(basis, f, quadrature_refinement=4):
    """Expand the projected data in the source basis and combine the responses.

    Cheap (one sparse solve against the source coefficient matrix) but the
    source matrix is typically much worse conditioned than the Galerkin system.
    """
    coarse = basis.coarse_grid
    p0 = project_P0(f, coarse, quadrature_refinement)
    G = basis.source_matrix
    if G.shape[0] != G.shape[1]:
        raise fem.SolverError(f"source matrix is not square: {G.shape}")
    if np.linalg.norm(p0.values) == 0.0:
        coeff = np.zeros(G.shape[1])
    else:
        coeff = spla.spsolve(G.tocsc(), p0.values)
    diagnostics = {}
    if G.shape[0] <= COND_ESTIMATE_LIMIT:
        svals = np.linalg.svd(G.toarray(), compute_uv=False)
        diagnostics["sigma_min"] = float(svals[-1])
        diagnostics["sigma_max"] = float(svals[0])
        diagnostics["condition_estimate"] = float(svals[0] / svals[-1]) if svals[-1] > 0 else np.inf
    if not np.all(np.isfinite(coeff)):
        raise fem.SolverError(
            f"collocation system is numerically singular (diagnostics {diagnostics})"
        )
    return CoarseSolution(
        method="collocation",
        coefficients=coeff,
        fine_representation=np.asarray(basis.phi_matrix @ coeff),
        diagnostics=diagnostics,
    )


def solve_fem(coarse, epsilon, velocity, f, nesting=None):
    """Standard Q1 Galerkin method on the coarse grid."""
    problem = fem.assemble(coarse, epsilon, velocity)
    load = fem.general_load(coarse, f)
    x = fem.solve(problem, load)
    full = problem.extend(x)
    fine_rep = nesting.prolongation @ full if nesting is not None else full
    return _check_finite(CoarseSolution(
        method="fem", coefficients=full, fine_representation=np.asarray(fine_rep),
    ))


def solve_supg(coarse, epsilon, velocity, f, delta=None, nesting=None):
    """Streamline-upwind stabilized Q1 method with elementwise parameter delta.

    Adds delta * (b . grad u, b . grad v) to the operator and
    delta * (f, b . grad v) to the load; delta defaults to H^2. With delta = 0
    the method reduces to the plain Galerkin one identically.
    """
    if delta is None:
        delta = coarse.mesh_size**2
    if delta < 0:
        raise ValueError(f"delta must be nonnegative, got {delta}")
    problem = fem.assemble(coarse, epsilon, velocity)
    streamline = fem.streamline_diffusion_matrix(coarse, velocity)
    stabilized = fem.AssembledProblem(
        domain=coarse,
        epsilon=problem.epsilon,
        velocity=velocity,
        stiffness_full=problem.stiffness_full,
        convection_full=(problem.convection_full + delta * streamline).tocsr(),
        mass_full=problem.mass_full,
        free_nodes=problem.free_nodes,
        dirichlet_nodes=problem.dirichlet_nodes,
    )
    load = fem.general_load(coarse, f) + delta * fem.streamline_load(
        coarse, velocity, f
    )[problem.free_nodes]
    x = fem.solve(stabilized, load)
    full = stabilized.extend(x)
    fine_rep = nesting.prolongation @ full if nesting is not None else full
    return _check_finite(CoarseSolution(
        method="supg", coefficients=full, fine_representation=np.asarray(fine_rep),
        diagnostics={"delta": float(delta)},
    ))


def solve_reference(fine, epsilon, velocity, f, fine_problem=None):
    """Global fine-grid Galerkin solve; warns when h does not resolve epsilon."""
    fem.peclet_warning(fine, epsilon, velocity)
    if fine_problem is None:
        fine_problem = fem.assemble(fine, epsilon, velocity)
    load = fem.general_load(fine, f)
    x = fem.solve(fine_problem, load)
    full = fine_problem.extend(x)
    return _check_finite(CoarseSolution(
        method="reference", coefficients=full, fine_representation=full,
    ))


def solve_ideal(coarse, fine, epsilon, velocity, f, nesting=None, fine_problem=None,
                quadrature_refinement=4):
    """Fine solve with the data projected onto coarse piecewise constants."""
    if nesting is None:
        nesting = build_nesting(coarse, fine)
    if fine_problem is None:
        fine_problem = fem.assemble(fine, epsilon, velocity)
    full = ideal_solve(fine_problem, nesting, f, quadrature_refinement)
    return _check_finite(CoarseSolution(
        method="ideal", coefficients=full, fine_representation=full,
    ))
