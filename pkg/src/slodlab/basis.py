"""Construction of the super-localized coarse basis.

For every coarse element the pipeline is: solve the patch problem for each
coarse-cell indicator source, measure the conormal-flux residual of each
response on the patch boundary inside the domain, form the flux Gram matrix,
take the eigenvectors in the lowest eigenvalue band as candidate source
functions, and pick the candidate combination that concentrates its mass near
the center (penalizing directions away from the local velocity). The selected
source is piecewise constant on the patch, L2-normalized over the domain; its
patch response is the basis function, and the L2 norm of its boundary-flux
residual is the localization indicator sigma_T.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from . import fem
from .jacobi import jacobi_eigh
from .mesh import Patch, TensorGrid, build_grid, build_nesting, build_patch

FORMAT_VERSION = 1


class DegenerateBoundaryError(RuntimeError):
    """The measured patch boundary is empty or its mass matrix is singular."""


class BasisBuildError(RuntimeError):
    """One or more basis entries failed to build."""

    def __init__(self, failures):
        self.failures = failures
        lines = ", ".join(f"element {t}: {exc}" for t, exc in failures)
        super().__init__(f"basis construction failed for {len(failures)} entries ({lines})")


class CacheKeyMismatchError(RuntimeError):
    """A cache file exists but was written for different build parameters."""


# ---------------------------------------------------------------------------
# boundary trace machinery


@dataclass
class BoundaryTrace:
    """L2 inner products of the nodal trace functions on the measured boundary.

    The measured part of the patch boundary excludes faces lying on the global
    domain boundary, where admissible test functions vanish.
    """

    patch: Patch
    measured_nodes: np.ndarray
    boundary_mass: sparse.csr_matrix

    @cached_property
    def _lu(self):
        try:
            return spla.splu(self.boundary_mass.tocsc())
        except RuntimeError as exc:
            raise DegenerateBoundaryError(f"boundary mass factorization failed: {exc}") from exc

    def apply_inverse(self, values):
        """Solve boundary_mass @ x = values (values may be a matrix of columns)."""
        return self._lu.solve(np.asarray(values, dtype=float))

    def riesz_norm(self, values):
        """L2 norm over the measured boundary of the functional with these coefficients."""
        values = np.asarray(values, dtype=float)
        return float(np.sqrt(max(values @ self.apply_inverse(values), 0.0)))


def boundary_trace(patch):
    """Assemble the boundary mass matrix of a patch over its measured nodes."""
    if patch.local_fine_grid is None:
        raise ValueError("patch was built without a nesting")
    measured = patch.interior_boundary_nodes
    if measured.size == 0:
        raise DegenerateBoundaryError(
            f"patch of element {patch.center_element} has no measured boundary"
        )
    box = patch.local_fine_grid
    dim, h = box.dim, box.h
    n_coarse = patch.coarse_grid.cells_per_axis

    rows, cols, vals = [], [], []
    for axis in range(dim):
        for side in (0, 1):
            inside = patch.coarse_lo[axis] > 0 if side == 0 else patch.coarse_hi[axis] < n_coarse - 1
            if not inside:
                continue
            fixed = 0 if side == 0 else box.cells[axis]
            other = [a for a in range(dim) if a != axis]
            if not other:
                side_nodes = np.asarray([fixed * box.node_strides[axis]])
                side_mass = sparse.csr_matrix(np.asarray([[1.0]]))
            else:
                side_mass = fem._mass_1d(box.cells[other[0]], h)
                for a in other[1:]:
                    side_mass = sparse.kron(fem._mass_1d(box.cells[a], h), side_mass, format="csr")
                ranges = [np.arange(box.cells[a] + 1) for a in other]
                grids = np.meshgrid(*ranges, indexing="ij")
                side_nodes = fixed * box.node_strides[axis]
                for a, g in zip(other, grids):
                    side_nodes = side_nodes + g.ravel(order="F") * box.node_strides[a]
            coo = side_mass.tocoo()
            rows.append(side_nodes[coo.row])
            cols.append(side_nodes[coo.col])
            vals.append(coo.data)
    mass_all = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(box.node_count, box.node_count),
    )
    boundary_mass = mass_all[measured][:, measured].tocsr()
    return BoundaryTrace(patch=patch, measured_nodes=measured, boundary_mass=boundary_mass)


# ---------------------------------------------------------------------------
# responses and flux residuals


@dataclass
class NormalDerivativeResidual:
    """Coefficients of the conormal-flux functional at the measured boundary nodes."""

    values: np.ndarray
    scaling: float


def local_responses(patch, epsilon, velocity, fine_h=None):
    """Patch solutions for every coarse-cell indicator load, zero on the patch boundary."""
    if fine_h is not None and not np.isclose(fine_h, patch.local_fine_grid.h):
        raise ValueError(
            f"fine_h={fine_h} does not match the patch fine mesh size {patch.local_fine_grid.h}"
        )
    problem = fem.assemble(patch, epsilon, velocity)
    loads = _indicator_loads(patch)
    return [problem.extend(_patch_solve(problem, patch, k, load)) for k, load in enumerate(loads)]


def boundary_residual(patch, problem, psi, load):
    """Flux residual (1/eps) * (A_full psi - load) at the measured boundary nodes.

    `psi` and `load` are full local vectors; interior rows vanish because psi
    solves the patch problem, so the functional is supported on the boundary.
    """
    values = _measured_flux(
        problem, patch.interior_boundary_nodes,
        np.asarray(psi, dtype=float), np.asarray(load, dtype=float))
    return NormalDerivativeResidual(values=values, scaling=problem.epsilon)


def _indicator_loads(patch):
    return np.stack(
        [fem.indicator_load(patch, k, None, full=True) for k in patch.elements]
    )


def _patch_solve(problem, patch, k, load_full):
    try:
        return fem.solve(problem, load_full[problem.free_nodes])
    except fem.SolverError as exc:
        raise fem.SolverError(
            f"patch solve failed (center {patch.center_element}, source cell "
            f"{patch.elements[k]}): {exc}",
            exc.residual,
        ) from exc


def _center_concentrated(cand_rows, center_pos, xi):
    """Unit candidate combination with the largest center-cell mass."""
    alpha = cand_rows[:, center_pos]
    nrm = np.linalg.norm(alpha)
    if nrm == 0.0:
        return xi[:, 0]
    return cand_rows.T @ (alpha / nrm)


def _measured_flux(problem, measured, phi_full, load_full):
    """Flux residual at the measured rows, accumulated in extended precision.

    The 1/eps scaling amplifies float64 matvec noise far above the true
    residual of a well-localized source, so the handful of boundary rows is
    evaluated with extended-precision dot products. `phi_full` and `load_full`
    may carry one solution per row; the residual then comes out rowwise.
    """
    squeeze = phi_full.ndim == 1
    phi = np.atleast_2d(np.asarray(phi_full))
    load = np.atleast_2d(np.asarray(load_full))
    rows = problem.matrix_full[measured]
    prod = rows.data.astype(np.longdouble)[None, :] * phi[:, rows.indices]
    sums = np.zeros((phi.shape[0], len(measured)), dtype=np.longdouble)
    nonempty = np.diff(rows.indptr) > 0
    sums[:, nonempty] = np.add.reduceat(prod, rows.indptr[:-1][nonempty], axis=1)
    residual = (sums - load[:, measured]) / np.longdouble(problem.epsilon)
    out = residual.astype(float)
    return out[0] if squeeze else out


def normal_gram(patch, residuals, trace=None):
    """Gram matrix of the flux residuals in L2 over the measured boundary.

    Entries are scaled by 1/(|T| |K|), the product of the source cell volumes,
    so the eigenvectors correspond to sources with unit-coefficient scaling on
    the uniform mesh. Symmetric positive semi-definite by construction.
    """
    if trace is None:
        trace = boundary_trace(patch)
    R = np.stack([r.values for r in residuals])
    H = patch.coarse_grid.mesh_size
    d = patch.coarse_grid.dim
    return (R @ trace.apply_inverse(R.T)) / (H**d * H**d)


# ---------------------------------------------------------------------------
# selection pipeline


def select_candidates(spectrum, p):
    """Indices (ascending, 0-based) of the low-eigenvalue band used as candidates.

    Keeps every eigenvalue whose ratio to the largest lies below
    max((lambda_1/lambda_max)^(1/p), 1e-10). A non-positive largest eigenvalue
    flags the patch and keeps only the first index.
    """
    spectrum = np.asarray(spectrum, dtype=float)
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if spectrum.size == 0:
        raise ValueError("empty spectrum")
    if np.any(np.diff(spectrum) < 0):
        raise ValueError("spectrum must be ascending")
    lam_max = spectrum[-1]
    if lam_max <= 0.0:
        return np.asarray([0], dtype=np.int64), True
    ratios = np.maximum(spectrum, 0.0) / lam_max
    threshold = max(ratios[0] ** (1.0 / p), 1e-10)
    return np.nonzero(ratios <= threshold)[0], False


def element_weights(patch, velocity, p_w):
    """Per-cell penalty weights: zero at the center, growing with the distance
    of the cell offset from the unit velocity direction at the center midpoint."""
    if p_w < 1:
        raise ValueError(f"p_w must be >= 1, got {p_w}")
    grid = patch.coarse_grid
    H = grid.mesh_size
    mid = grid.box.element_midpoints(patch.elements)
    m_t = grid.box.element_midpoints(np.asarray([patch.center_element]))[0]
    offsets = np.rint((mid - m_t) / H)
    b_t = velocity(m_t[None, :])[0]
    nb = float(np.linalg.norm(b_t))
    flagged = False
    if nb == 0.0:
        flagged = True
        dist = np.max(np.abs(offsets), axis=1)
    else:
        dist = np.max(np.abs(offsets - b_t / nb), axis=1)
    weights = dist ** (2.0 * p_w)
    weights[patch.elements == patch.center_element] = 0.0
    return weights, flagged


def weighted_gram(candidate_sources, weights, mesh_size, dim):
    """Weighted L2 Gram of normalized candidate sources over the patch cells.

    `candidate_sources` holds one piecewise-constant coefficient row per
    candidate; entry (i, j) integrates w * g_i * g_j over the patch, divided by
    the L2 norms of both sources.
    """
    G = np.atleast_2d(np.asarray(candidate_sources, dtype=float))
    w = np.asarray(weights, dtype=float)
    vol = mesh_size**dim
    norms = np.sqrt(vol) * np.linalg.norm(G, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("candidate source with zero norm")
    W = (G * w[None, :]) @ G.T * vol
    return W / np.outer(norms, norms)


# ---------------------------------------------------------------------------
# basis entries


@dataclass
class SlodBasisEntry:
    """Per-element basis data: source coefficients, response, spectrum, indicator."""

    center_element: int
    level: int
    patch_elements: np.ndarray
    g_values: np.ndarray
    phi_nodes: np.ndarray
    phi_values: np.ndarray
    spectrum: np.ndarray
    candidate_set: np.ndarray
    sigma_t: float
    flags: tuple = ()
    patch: Patch = None


def build_entry(center, coarse, fine, epsilon, velocity, ell, p=1.5, p_w=2.0,
                nesting=None, allow_full_domain=False):
    """Build the basis entry of one coarse element (see module docstring)."""
    if nesting is None:
        nesting = build_nesting(coarse, fine)
    patch = build_patch(coarse, center, ell, nesting, allow_full_domain=allow_full_domain)
    H = coarse.mesh_size
    d = coarse.dim
    n_p = patch.elements.size
    l2_scale = H ** (d / 2.0)
    flags = []

    problem = fem.assemble(patch, epsilon, velocity)
    loads = _indicator_loads(patch)

    if patch.interior_boundary_nodes is None or patch.interior_boundary_nodes.size == 0:
        # Patch boundary lies entirely on the domain boundary: every source has a
        # vanishing flux functional, so keep the center indicator for stability.
        coeff = np.zeros(n_p)
        coeff[np.searchsorted(patch.elements, center)] = 1.0
        spectrum = np.zeros(n_p)
        candidates = np.asarray([0], dtype=np.int64)
        flags.append("full_domain_patch")
        g_values = coeff / l2_scale
        load = g_values @ loads
        phi_free = _patch_solve(problem, patch, 0, load)
        phi_full = problem.extend(phi_free)
        sigma_t = 0.0
    else:
        trace = boundary_trace(patch)
        psi_free = problem._lu.solve(loads[:, problem.free_nodes].T)  # (n_free, n_p)
        psi_full = np.zeros((n_p, loads.shape[1]))
        psi_full[:, problem.free_nodes] = psi_free.T
        R = _measured_flux(problem, patch.interior_boundary_nodes, psi_full, loads)

        B = (R @ trace.apply_inverse(R.T)) / (H**d * H**d)
        spectrum, xi = jacobi_eigh(B)
        candidates, sel_flag = select_candidates(spectrum, p)
        if sel_flag:
            flags.append("zero_flux_spectrum")
        weights, w_flag = element_weights(patch, velocity, p_w)
        if w_flag:
            flags.append("zero_velocity_at_center")

        cand_rows = xi[:, candidates].T
        center_pos = int(np.searchsorted(patch.elements, center))
        coeff = None
        if candidates.size == 1:
            coeff = cand_rows[0]
        else:
            try:
                W = weighted_gram(cand_rows, weights, H, d)
                wl, wv = jacobi_eigh(W)
                if wl[-1] <= 0.0 or wl[0] <= 1e-12 * wl[-1]:
                    # A candidate combination supported on zero-weight cells makes
                    # the weighted norm unable to rank the tie (and can duplicate a
                    # neighboring patch's source); concentrate on the center instead.
                    flags.append("candidate_step_degenerate")
                    coeff = _center_concentrated(cand_rows, center_pos, xi)
                else:
                    coeff = cand_rows.T @ wv[:, 0]
            except (ValueError, RuntimeError):
                flags.append("candidate_step_degenerate")
                coeff = _center_concentrated(cand_rows, center_pos, xi)

        nrm = np.linalg.norm(coeff)
        if nrm == 0.0 or not np.all(np.isfinite(coeff)):
            flags.append("candidate_step_degenerate")
            coeff = np.zeros(n_p)
            coeff[center_pos] = 1.0
            nrm = 1.0
        coeff = coeff / nrm
        k = int(np.argmax(np.abs(coeff)))
        if coeff[k] < 0.0:
            coeff = -coeff
        g_values = coeff / l2_scale
        phi_full = g_values @ psi_full
        load_g = g_values @ loads
        sigma_t = trace.riesz_norm(
            _measured_flux(problem, patch.interior_boundary_nodes, phi_full, load_g))

    free = problem.free_nodes
    entry = SlodBasisEntry(
        center_element=int(center),
        level=int(ell),
        patch_elements=patch.elements.copy(),
        g_values=g_values,
        phi_nodes=patch.fine_node_map[free].copy(),
        phi_values=phi_full[free].copy(),
        spectrum=np.asarray(spectrum, dtype=float),
        candidate_set=np.asarray(candidates, dtype=np.int64),
        sigma_t=float(sigma_t),
        flags=tuple(flags),
        patch=patch,
    )
    _check_entry_finite(entry)
    return entry


def _check_entry_finite(entry):
    for name in ("g_values", "phi_values", "spectrum"):
        if not np.all(np.isfinite(getattr(entry, name))):
            raise RuntimeError(
                f"non-finite {name} in basis entry of element {entry.center_element}"
            )
    if not np.isfinite(entry.sigma_t) or entry.sigma_t < 0.0:
        raise RuntimeError(f"invalid sigma_T in basis entry of element {entry.center_element}")


# ---------------------------------------------------------------------------
# whole bases


@dataclass
class SlodBasis:
    """One basis entry per coarse element, sharing (epsilon, level, p, p_w)."""

    coarse_grid: TensorGrid
    fine_grid: TensorGrid
    epsilon: float
    velocity_descriptor: dict
    level: int
    p: float
    p_w: float
    entries: list

    def sigma(self):
        return max(entry.sigma_t for entry in self.entries)

    @cached_property
    def source_matrix(self):
        """Sparse (coarse element count x basis size) matrix of source coefficients."""
        rows, cols, vals = [], [], []
        for j, entry in enumerate(self.entries):
            rows.append(entry.patch_elements)
            cols.append(np.full(entry.patch_elements.size, j, dtype=np.int64))
            vals.append(entry.g_values)
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.coarse_grid.element_count, len(self.entries)),
        )

    @cached_property
    def phi_matrix(self):
        """Sparse (fine node count x basis size) matrix of basis function values."""
        rows, cols, vals = [], [], []
        for j, entry in enumerate(self.entries):
            rows.append(entry.phi_nodes)
            cols.append(np.full(entry.phi_nodes.size, j, dtype=np.int64))
            vals.append(entry.phi_values)
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.fine_grid.node_count, len(self.entries)),
        )


def sigma(basis):
    """Worst-case localization indicator: the largest sigma_T of the basis."""
    return basis.sigma()


def _entry_payload_worker(payload):
    (center, dim, n_coarse, n_fine, epsilon, vdesc, ell, p, p_w, allow) = payload
    coarse = build_grid(dim, n_coarse)
    fine = build_grid(dim, n_fine)
    velocity = fem.velocity_from_descriptor(vdesc)
    return build_entry(center, coarse, fine, epsilon, velocity, ell, p, p_w,
                       allow_full_domain=allow)


def build_basis(coarse, fine, epsilon, velocity, ell, p=1.5, p_w=2.0, workers=1,
                allow_full_domain=False):
    """Build the basis entry of every coarse element.

    Entries are independent; `workers` > 1 distributes them over processes
    (results do not depend on the worker count). Per-entry failures are
    aggregated into a BasisBuildError.
    """
    nesting = build_nesting(coarse, fine)
    n = coarse.element_count
    desc = velocity.descriptor()
    entries = [None] * n
    failures = []
    if workers > 1:
        if velocity.kind == "tabulated":
            raise ValueError("tabulated velocity fields require workers=1")
        payloads = [
            (t, coarse.dim, coarse.cells_per_axis, fine.cells_per_axis, epsilon,
             desc, ell, p, p_w, allow_full_domain)
            for t in range(n)
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for t, result in enumerate(pool.map(_entry_payload_worker, payloads, chunksize=8)):
                entries[t] = result
    else:
        for t in range(n):
            try:
                entries[t] = build_entry(t, coarse, fine, epsilon, velocity, ell, p, p_w,
                                         nesting=nesting, allow_full_domain=allow_full_domain)
            except Exception as exc:  # noqa: BLE001 - aggregated below
                failures.append((t, exc))
    if failures:
        raise BasisBuildError(failures)
    return SlodBasis(
        coarse_grid=coarse,
        fine_grid=fine,
        epsilon=float(epsilon),
        velocity_descriptor=desc,
        level=int(ell),
        p=float(p),
        p_w=float(p_w),
        entries=entries,
    )


# ---------------------------------------------------------------------------
# basis cache


def basis_key(dim, n_coarse, n_fine, epsilon, velocity_descriptor, ell, p, p_w):
    return {
        "format_version": FORMAT_VERSION,
        "dim": int(dim),
        "n_coarse": int(n_coarse),
        "n_fine": int(n_fine),
        "epsilon": float(epsilon),
        "velocity": velocity_descriptor,
        "ell": int(ell),
        "p": float(p),
        "p_w": float(p_w),
    }


def key_of_basis(basis):
    return basis_key(
        basis.coarse_grid.dim,
        basis.coarse_grid.cells_per_axis,
        basis.fine_grid.cells_per_axis,
        basis.epsilon,
        basis.velocity_descriptor,
        basis.level,
        basis.p,
        basis.p_w,
    )


def save_basis(basis, path):
    """Write a basis to a single npz file (bitwise-exact roundtrip)."""
    key_json = json.dumps(key_of_basis(basis), sort_keys=True)
    offsets_g = np.cumsum([0] + [e.patch_elements.size for e in basis.entries])
    offsets_phi = np.cumsum([0] + [e.phi_nodes.size for e in basis.entries])
    offsets_cand = np.cumsum([0] + [e.candidate_set.size for e in basis.entries])
    np.savez_compressed(
        path,
        key=np.frombuffer(key_json.encode(), dtype=np.uint8),
        centers=np.asarray([e.center_element for e in basis.entries], dtype=np.int64),
        sigmas=np.asarray([e.sigma_t for e in basis.entries]),
        flags=np.frombuffer(
            json.dumps([list(e.flags) for e in basis.entries]).encode(), dtype=np.uint8
        ),
        g_offsets=offsets_g,
        g_elements=np.concatenate([e.patch_elements for e in basis.entries]),
        g_values=np.concatenate([e.g_values for e in basis.entries]),
        spectrum_values=np.concatenate([e.spectrum for e in basis.entries]),
        cand_offsets=offsets_cand,
        cand_values=np.concatenate([e.candidate_set for e in basis.entries]),
        phi_offsets=offsets_phi,
        phi_nodes=np.concatenate([e.phi_nodes for e in basis.entries]),
        phi_values=np.concatenate([e.phi_values for e in basis.entries]),
    )


def load_basis(path, expected_key):
    """Load a cached basis; refuse on any key mismatch."""
    with np.load(path) as data:
        stored_key = json.loads(bytes(data["key"]).decode())
        if stored_key != json.loads(json.dumps(expected_key, sort_keys=True)):
            raise CacheKeyMismatchError(
                f"cache key mismatch: stored {stored_key}, expected {expected_key}"
            )
        centers = data["centers"]
        sigmas = data["sigmas"]
        flags = json.loads(bytes(data["flags"]).decode())
        og, oc, op = data["g_offsets"], data["cand_offsets"], data["phi_offsets"]
        entries = []
        for i, center in enumerate(centers):
            entries.append(
                SlodBasisEntry(
                    center_element=int(center),
                    level=int(expected_key["ell"]),
                    patch_elements=data["g_elements"][og[i]:og[i + 1]].copy(),
                    g_values=data["g_values"][og[i]:og[i + 1]].copy(),
                    phi_nodes=data["phi_nodes"][op[i]:op[i + 1]].copy(),
                    phi_values=data["phi_values"][op[i]:op[i + 1]].copy(),
                    spectrum=data["spectrum_values"][og[i]:og[i + 1]].copy(),
                    candidate_set=data["cand_values"][oc[i]:oc[i + 1]].copy(),
                    sigma_t=float(sigmas[i]),
                    flags=tuple(flags[i]),
                )
            )
    return SlodBasis(
        coarse_grid=build_grid(expected_key["dim"], expected_key["n_coarse"]),
        fine_grid=build_grid(expected_key["dim"], expected_key["n_fine"]),
        epsilon=expected_key["epsilon"],
        velocity_descriptor=expected_key["velocity"],
        level=expected_key["ell"],
        p=expected_key["p"],
        p_w=expected_key["p_w"],
        entries=entries,
    )
