"""Symmetric eigenvalues by cyclic Jacobi rotations, and the Gram/covariance
spectrum comparison built on it."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor


class ConvergenceError(RuntimeError):
    pass


def jacobi_eigvalsh(A, tol: float = 1e-15, max_sweeps: int = 60) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, sorted descending.

    Cyclic-by-row Jacobi: each rotation zeroes one off-diagonal pair.
    Sweeps stop once the off-diagonal Frobenius norm falls below
    ``tol`` times the matrix norm.
    """
    A = np.array(A, dtype=np.float64, copy=True)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"expected a square matrix, got {A.shape}")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        raise ValueError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    scale = np.linalg.norm(A)
    if n < 2 or scale == 0.0:
        return np.sort(np.diag(A))[::-1]

    def off_norm():
        # summed directly: total minus diagonal would cancel near convergence
        return np.sqrt(2.0 * np.sum(np.triu(A, 1) ** 2))

    for _ in range(max_sweeps):
        if off_norm() <= tol * scale:
            return np.sort(np.diag(A))[::-1]
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J, rotating rows and columns p, q
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                cp, cq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
                A[p, q] = A[q, p] = 0.0
    if off_norm() <= tol * scale * 1e3:
        return np.sort(np.diag(A))[::-1]
    raise ConvergenceError(
        f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal norm {off_norm():.3e}, "
        f"matrix norm {scale:.3e})"
    )


def spectrum_compare(X: Tensor | np.ndarray, max_extent: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues of the Gram matrix X X^T and of X^T X, each descending.

    The leading min(N, d) entries of the two spectra coincide; the longer one
    is padded with (numerical) zeros.
    """
    X = as_tensor(X).data.astype(np.float64)
    if X.ndim != 2:
        raise ValueError(f"spectrum_compare expects an N x d matrix, got {X.shape}")
    if max(X.shape) > max_extent:
        raise ValueError(f"spectrum_compare is for small matrices (N, d <= {max_extent}); got {X.shape}")
    return jacobi_eigvalsh(X @ X.T), jacobi_eigvalsh(X.T @ X)


def spectrum_gap(X) -> float:
    """Largest relative disagreement between the shared nonzero eigenvalues."""
    g, c = spectrum_compare(X)
    k = min(len(g), len(c))
    a, b = g[:k], c[:k]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), np.finfo(float).tiny)
    return float(np.max(np.abs(a - b) / denom)) if k else 0.0
