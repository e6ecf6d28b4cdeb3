"""Dense symmetric eigendecomposition by cyclic Jacobi rotations.

Patch eigenproblems are small (at most a few hundred rows), so plain Jacobi
sweeps give a robust, platform-independent decomposition with a deterministic
eigenvector sign convention. Entries of Gram matrices can differ by many
orders of magnitude; rotations therefore stop on the relative per-pair
criterion |a_pq| <= tol * sqrt(|a_pp a_qq|), which keeps small eigenvalues
accurate where an absolute threshold would stall.
"""

from __future__ import annotations

import numpy as np


def jacobi_eigh(A, tol=1e-15, max_sweeps=60):
    """Eigenvalues (ascending) and eigenvectors (columns) of a symmetric matrix.

    The working copy is symmetrized first; each returned eigenvector has its
    largest-magnitude entry positive.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    B = 0.5 * (A + A.T)
    V = np.eye(n)
    norm_f = np.linalg.norm(B)
    if n == 1 or norm_f == 0.0:
        return np.diag(B).copy(), V

    abs_floor = 1e-300  # treat denormal-level couplings as converged
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = B[p, q]
                threshold = tol * np.sqrt(abs(B[p, p] * B[q, q]))
                if abs(apq) <= max(threshold, abs_floor):
                    continue
                rotated = True
                theta = 0.5 * (B[q, q] - B[p, p]) / apq
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) \
                    if theta != 0.0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                bp = B[p, :].copy()
                bq = B[q, :].copy()
                B[p, :] = c * bp - s * bq
                B[q, :] = s * bp + c * bq
                bp = B[:, p].copy()
                bq = B[:, q].copy()
                B[:, p] = c * bp - s * bq
                B[:, q] = s * bp + c * bq
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        off = np.sqrt(max(np.linalg.norm(B) ** 2 - np.dot(np.diag(B), np.diag(B)), 0.0))
        if off > 1e-10 * norm_f:
            raise RuntimeError(f"Jacobi sweeps did not converge: off-diagonal {off:.3e}")

    eigvals = np.diag(B).copy()
    order = np.argsort(eigvals, kind="stable")
    eigvals = eigvals[order]
    V = V[:, order]
    for j in range(n):
        k = int(np.argmax(np.abs(V[:, j])))
        if V[k, j] < 0.0:
            V[:, j] = -V[:, j]
    return eigvals, V
