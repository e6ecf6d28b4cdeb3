"""Piecewise-constant coarse space, its L2-orthogonal projection, and the ideal solve.

The ideal coarse method solves the fine problem with the right-hand side
replaced by its elementwise average over the coarse mesh; for data that is
already piecewise constant on the coarse mesh it reproduces the fine
reference solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem
from .mesh import TensorGrid


@dataclass
class P0Function:
    """Piecewise-constant function on a coarse TensorGrid, one value per element."""

    coarse_grid: TensorGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.coarse_grid.element_count,):
            raise ValueError(
                f"expected {self.coarse_grid.element_count} element values, "
                f"got shape {self.values.shape}"
            )

    def __call__(self, points):
        """Evaluate at points strictly inside elements (quadrature points qualify)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = self.coarse_grid.cells_per_axis
        idx = np.clip((points * n).astype(np.int64), 0, n - 1)
        return self.values[self.coarse_grid.box.element_id(idx)]

    def l2_norm(self):
        # uniform grids: ||p||_L2 = H^(d/2) * ||values||_2
        H = self.coarse_grid.mesh_size
        d = self.coarse_grid.dim
        return H ** (d / 2.0) * float(np.linalg.norm(self.values))


def project_P0(f, coarse, quadrature_refinement=4):
    """Elementwise averages of f on the coarse grid.

    Averages are computed with a composite Gauss rule using
    `quadrature_refinement` panels per axis per element (5 Gauss points per
    panel), so smooth integrands are averaged far below discretization error.
    Projecting a P0Function living on the same grid returns a copy of it.
    """
    if quadrature_refinement < 1:
        raise ValueError("quadrature_refinement must be >= 1")
    if isinstance(f, P0Function) and f.coarse_grid.cells_per_axis == coarse.cells_per_axis \
            and f.coarse_grid.dim == coarse.dim:
        return P0Function(coarse_grid=coarse, values=f.values.copy())

    dim = coarse.dim
    H = coarse.mesh_size
    pts_1d, w_1d = np.polynomial.legendre.leggauss(5)
    panels = np.arange(quadrature_refinement) / quadrature_refinement
    # reference points/weights on [0,1] for the composite rule
    ref = (panels[:, None] + (pts_1d[None, :] + 1.0) / (2.0 * quadrature_refinement)).ravel()
    w_ref = np.tile(w_1d / (2.0 * quadrature_refinement), quadrature_refinement)

    grids = np.meshgrid(*([ref] * dim), indexing="ij")
    ref_nd = np.stack([g.ravel() for g in grids], axis=-1)
    w_nd = np.ones(ref_nd.shape[0])
    for g in np.meshgrid(*([w_ref] * dim), indexing="ij"):
        w_nd = w_nd * g.ravel()

    origins = H * coarse.box.element_multi_index(np.arange(coarse.element_count))
    values = np.empty(coarse.element_count)
    ones = np.ones(ref_nd.shape[0])
    w_total = float(np.dot(w_nd, ones))
    for e in range(coarse.element_count):
        f_vals = np.asarray(f(origins[e] + H * ref_nd), dtype=float)
        # same-expression denominator keeps averages of constants exact
        values[e] = float(np.dot(w_nd, f_vals)) / w_total
    return P0Function(coarse_grid=coarse, values=values)


def p0_load(fine, nesting, p0, full=False):
    """Exact fine load vector of a P0Function (sums of indicator loads)."""
    box = fine.box
    h = box.h
    per_elem = p0.values[nesting.fine_element_parent] * (h**box.dim / 2**box.dim)
    load = np.zeros(box.node_count)
    np.add.at(load, box.element_nodes.ravel(), np.repeat(per_elem, 2**box.dim))
    if full:
        return load
    return load[box.interior_nodes]


def ideal_solve(fine_problem, nesting, f, quadrature_refinement=4):
    """Fine-grid solve with the right-hand side projected onto coarse P0.

    Realizes the ideal coarse method exactly: the solution lies in the span of
    the fine responses to coarse element indicators, and equals the fine
    reference whenever f is already piecewise constant on the coarse grid.
    Returns the full fine nodal vector.
    """
    if nesting.fine.cells_per_axis != fine_problem.domain.cells_per_axis:
        raise ValueError("nesting fine grid does not match the assembled problem")
    p0 = project_P0(f, nesting.coarse, quadrature_refinement)
    load = fem.general_load(fine_problem.domain, p0)
    x = fem.solve(fine_problem, load)
    return fine_problem.extend(x)
