"""Coarse-scale solver laboratory for singularly perturbed convection-diffusion problems."""

from .analysis import (
    DecayFit,
    ErrorReport,
    convergence_study,
    eigen_decay_report,
    error_norms,
    fit_decay,
    localization_decay,
    riesz_report,
)
from .basis import (
    SlodBasis,
    SlodBasisEntry,
    boundary_residual,
    boundary_trace,
    build_basis,
    build_entry,
    element_weights,
    load_basis,
    local_responses,
    normal_gram,
    save_basis,
    select_candidates,
    sigma,
    weighted_gram,
)
from .fem import (
    AssembledProblem,
    SolverError,
    VelocityField,
    affine_velocity,
    assemble,
    constant_velocity,
    general_load,
    indicator_load,
    rotational_velocity,
    solve,
    tabulated_velocity,
)
from .mesh import (
    NestingMap,
    Patch,
    PatchCoversDomainError,
    TensorGrid,
    build_grid,
    build_nesting,
    build_patch,
    element_midpoint,
)
from .projection import P0Function, ideal_solve, project_P0
from .solvers import (
    CoarseSolution,
    solve_collocation,
    solve_fem,
    solve_ideal,
    solve_reference,
    solve_slod,
    solve_supg,
)

__version__ = "0.1.0"
