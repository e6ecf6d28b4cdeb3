"""Uniform tensor-product grids on (0,1)^d with coarse/fine nesting and element patches.

All grids are axis-aligned with cubic cells of uniform size. Elements and
nodes are numbered lexicographically with axis 0 running fastest, which makes
every index map a closed-form expression and keeps downstream eigenvector and
file output deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sparse


class PatchCoversDomainError(ValueError):
    """The requested element neighborhood expands to the entire domain."""


@dataclass
class BoxGrid:
    """Axis-aligned box of uniform cubic cells.

    `cells[a]` counts cells along axis `a`; all cells have side length `h`.
    The box spans ``origin[a] .. origin[a] + cells[a]*h`` per axis. Node and
    element ids are lexicographic with axis 0 fastest.
    """

    dim: int
    cells: tuple
    h: float
    origin: tuple

    @cached_property
    def nodes_per_axis(self):
        return tuple(int(c) + 1 for c in self.cells)

    @cached_property
    def node_count(self):
        return int(np.prod(self.nodes_per_axis))

    @cached_property
    def element_count(self):
        return int(np.prod(self.cells))

    @cached_property
    def node_strides(self):
        s = np.ones(self.dim, dtype=np.int64)
        for a in range(1, self.dim):
            s[a] = s[a - 1] * self.nodes_per_axis[a - 1]
        return s

    @cached_property
    def element_strides(self):
        s = np.ones(self.dim, dtype=np.int64)
        for a in range(1, self.dim):
            s[a] = s[a - 1] * self.cells[a - 1]
        return s

    def node_multi_index(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        out = np.empty(ids.shape + (self.dim,), dtype=np.int64)
        rem = ids
        for a in range(self.dim):
            out[..., a] = rem % self.nodes_per_axis[a]
            rem = rem // self.nodes_per_axis[a]
        return out

    def node_id(self, multi):
        multi = np.asarray(multi, dtype=np.int64)
        return multi @ self.node_strides

    def element_multi_index(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        out = np.empty(ids.shape + (self.dim,), dtype=np.int64)
        rem = ids
        for a in range(self.dim):
            out[..., a] = rem % self.cells[a]
            rem = rem // self.cells[a]
        return out

    def element_id(self, multi):
        multi = np.asarray(multi, dtype=np.int64)
        return multi @ self.element_strides

    def node_coords(self, ids=None):
        if ids is None:
            ids = np.arange(self.node_count)
        multi = self.node_multi_index(ids)
        return np.asarray(self.origin) + self.h * multi

    def element_midpoints(self, ids=None):
        if ids is None:
            ids = np.arange(self.element_count)
        multi = self.element_multi_index(ids)
        return np.asarray(self.origin) + self.h * (multi + 0.5)

    @cached_property
    def element_nodes(self):
        """(element_count, 2^dim) table of node ids; corner c has bit a set iff
        the corner is offset along axis a (corners lexicographic, axis 0 fastest)."""
        multi = self.element_multi_index(np.arange(self.element_count))
        base = multi @ self.node_strides
        corners = np.zeros(2**self.dim, dtype=np.int64)
        for c in range(2**self.dim):
            for a in range(self.dim):
                if (c >> a) & 1:
                    corners[c] += self.node_strides[a]
        return base[:, None] + corners[None, :]

    @cached_property
    def boundary_node_mask(self):
        multi = self.node_multi_index(np.arange(self.node_count))
        mask = np.zeros(self.node_count, dtype=bool)
        for a in range(self.dim):
            mask |= (multi[:, a] == 0) | (multi[:, a] == self.cells[a])
        return mask

    @cached_property
    def boundary_nodes(self):
        return np.nonzero(self.boundary_node_mask)[0]

    @cached_property
    def interior_nodes(self):
        return np.nonzero(~self.boundary_node_mask)[0]


@dataclass
class TensorGrid:
    """Uniform grid of the unit hypercube (0,1)^dim with cells_per_axis cells per axis."""

    dim: int
    cells_per_axis: int

    @property
    def mesh_size(self):
        return 1.0 / self.cells_per_axis

    @cached_property
    def box(self):
        return BoxGrid(
            dim=self.dim,
            cells=(self.cells_per_axis,) * self.dim,
            h=self.mesh_size,
            origin=(0.0,) * self.dim,
        )

    @property
    def node_count(self):
        return self.box.node_count

    @property
    def element_count(self):
        return self.box.element_count


def build_grid(dim, cells_per_axis):
    """Build a TensorGrid; dim must be 1, 2 or 3 and cells_per_axis at least 2."""
    if dim not in (1, 2, 3):
        raise ValueError(f"dim must be 1, 2 or 3, got {dim}")
    if not isinstance(cells_per_axis, (int, np.integer)) or cells_per_axis < 2:
        raise ValueError(f"cells_per_axis must be an integer >= 2, got {cells_per_axis}")
    return TensorGrid(dim=int(dim), cells_per_axis=int(cells_per_axis))


def element_midpoint(grid, element):
    """Midpoint of an element of a TensorGrid."""
    if not 0 <= element < grid.element_count:
        raise ValueError(f"element id {element} out of range [0, {grid.element_count})")
    return grid.box.element_midpoints(np.asarray([element]))[0]


@dataclass
class Patch:
    """The level-ell element neighborhood of a coarse element, with its fine submesh.

    `elements` lists the coarse element ids of the neighborhood (lexicographic).
    When built with a nesting, `local_fine_grid` is the fine submesh covering the
    patch, `fine_node_map` maps local fine node ids to global ones, and the fine
    nodes on the patch boundary are split into those on the domain interior
    (`interior_boundary_nodes`, the measured part) and those on the global
    boundary (`global_boundary_nodes`).
    """

    center_element: int
    level: int
    coarse_grid: TensorGrid
    coarse_lo: np.ndarray
    coarse_hi: np.ndarray
    elements: np.ndarray
    refinement: int = 0
    local_fine_grid: BoxGrid = None
    fine_node_map: np.ndarray = None
    interior_boundary_nodes: np.ndarray = None
    global_boundary_nodes: np.ndarray = None

    @property
    def is_full_domain(self):
        n = self.coarse_grid.cells_per_axis
        return bool(np.all(self.coarse_lo == 0) and np.all(self.coarse_hi == n - 1))

    def local_elements_of(self, coarse_element):
        """Local fine element ids covered by a coarse element of the patch."""
        if coarse_element not in self.elements:
            raise ValueError(f"coarse element {coarse_element} not in patch of {self.center_element}")
        r = self.refinement
        cm = self.coarse_grid.box.element_multi_index(np.asarray([coarse_element]))[0]
        lo = (cm - self.coarse_lo) * r
        ranges = [np.arange(lo[a], lo[a] + r) for a in range(self.coarse_grid.dim)]
        grids = np.meshgrid(*ranges, indexing="ij")
        multi = np.stack([g.ravel() for g in grids], axis=-1)
        return self.local_fine_grid.element_id(multi)


def build_patch(grid, center, level, nesting=None, allow_full_domain=False):
    """Neighborhood of `center` obtained by `level` layers of adjacent elements.

    On tensor grids this is the box of elements within index distance `level`
    of the center in the supremum metric, clipped at the domain boundary.
    Raises PatchCoversDomainError when the neighborhood is the whole domain,
    unless allow_full_domain is set. Passing a NestingMap populates the fine
    submesh and its boundary classification.
    """
    if level < 1:
        raise ValueError(f"patch level must be >= 1, got {level}")
    if not 0 <= center < grid.element_count:
        raise ValueError(f"center element {center} out of range")
    n = grid.cells_per_axis
    cm = grid.box.element_multi_index(np.asarray([center]))[0]
    lo = np.maximum(cm - level, 0)
    hi = np.minimum(cm + level, n - 1)
    if np.all(lo == 0) and np.all(hi == n - 1) and not allow_full_domain:
        raise PatchCoversDomainError(
            f"patch of element {center} at level {level} covers the whole domain"
        )
    ranges = [np.arange(lo[a], hi[a] + 1) for a in range(grid.dim)]
    grids = np.meshgrid(*ranges, indexing="ij")
    multi = np.stack([g.ravel() for g in grids], axis=-1)
    elements = np.sort(grid.box.element_id(multi))

    patch = Patch(
        center_element=int(center),
        level=int(level),
        coarse_grid=grid,
        coarse_lo=lo,
        coarse_hi=hi,
        elements=elements,
    )
    if nesting is not None:
        if nesting.coarse is not grid and nesting.coarse.cells_per_axis != n:
            raise ValueError("nesting does not refine the patch's coarse grid")
        r = nesting.refinement_ratio
        H = grid.mesh_size
        cells_f = tuple(int((hi[a] - lo[a] + 1) * r) for a in range(grid.dim))
        fine_box = BoxGrid(
            dim=grid.dim,
            cells=cells_f,
            h=nesting.fine.mesh_size,
            origin=tuple(lo[a] * H for a in range(grid.dim)),
        )
        local_multi = fine_box.node_multi_index(np.arange(fine_box.node_count))
        global_multi = local_multi + lo * r
        fine_node_map = nesting.fine.box.node_id(global_multi)

        n_fine = nesting.fine.cells_per_axis
        on_patch_bdry = fine_box.boundary_node_mask
        on_global_bdry = np.zeros(fine_box.node_count, dtype=bool)
        for a in range(grid.dim):
            on_global_bdry |= (global_multi[:, a] == 0) | (global_multi[:, a] == n_fine)

        patch.refinement = r
        patch.local_fine_grid = fine_box
        patch.fine_node_map = fine_node_map
        patch.interior_boundary_nodes = np.nonzero(on_patch_bdry & ~on_global_bdry)[0]
        patch.global_boundary_nodes = np.nonzero(on_patch_bdry & on_global_bdry)[0]
    return patch


def _interp_1d(n_coarse, ratio):
    """1D linear interpolation matrix from coarse to fine nodal values."""
    n_fine = n_coarse * ratio
    rows, cols, vals = [], [], []
    for i in range(n_fine + 1):
        j, rem = divmod(i, ratio)
        t = rem / ratio
        rows.append(i)
        cols.append(j)
        vals.append(1.0 - t)
        if rem:
            rows.append(i)
            cols.append(j + 1)
            vals.append(t)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_fine + 1, n_coarse + 1))


@dataclass
class NestingMap:
    """Exact refinement relation between a coarse and a fine TensorGrid."""

    coarse: TensorGrid
    fine: TensorGrid
    refinement_ratio: int

    @cached_property
    def prolongation(self):
        """Sparse map of coarse Q1 nodal values to fine ones (multilinear interpolation)."""
        p1 = _interp_1d(self.coarse.cells_per_axis, self.refinement_ratio)
        out = p1
        for _ in range(1, self.coarse.dim):
            out = sparse.kron(p1, out, format="csr")
        return out

    @cached_property
    def fine_element_parent(self):
        """Coarse parent element id for every fine element."""
        multi = self.fine.box.element_multi_index(np.arange(self.fine.element_count))
        return self.coarse.box.element_id(multi // self.refinement_ratio)

    def element_children(self, coarse_element):
        """Fine element ids inside a coarse element."""
        if not 0 <= coarse_element < self.coarse.element_count:
            raise ValueError(f"coarse element {coarse_element} out of range")
        r = self.refinement_ratio
        cm = self.coarse.box.element_multi_index(np.asarray([coarse_element]))[0]
        ranges = [np.arange(cm[a] * r, (cm[a] + 1) * r) for a in range(self.coarse.dim)]
        grids = np.meshgrid(*ranges, indexing="ij")
        multi = np.stack([g.ravel() for g in grids], axis=-1)
        return np.sort(self.fine.box.element_id(multi))


def build_nesting(coarse, fine):
    """Nest a fine grid into a coarse one; resolutions must divide exactly."""
    if coarse.dim != fine.dim:
        raise ValueError(f"dimension mismatch: coarse {coarse.dim}, fine {fine.dim}")
    if fine.cells_per_axis % coarse.cells_per_axis != 0:
        raise ValueError(
            f"fine resolution {fine.cells_per_axis} is not a multiple of "
            f"coarse resolution {coarse.cells_per_axis}"
        )
    return NestingMap(
        coarse=coarse,
        fine=fine,
        refinement_ratio=fine.cells_per_axis // coarse.cells_per_axis,
    )
