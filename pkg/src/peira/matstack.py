"""Minimal dense linear algebra for small float64 matrices.

Everything downstream (moments, predictors, oracles, Jacobians) lives on
matrices of side at most a few hundred, so this module is a thin, strictly
validated veneer over LAPACK: symmetric eigendecomposition, SVD, SPD shifted
solves, and the handful of scalar reductions the rest of the package uses.

A "matrix" here is a validated 2-D C-contiguous float64 ``numpy.ndarray``
(``shape[0]`` rows, ``shape[1]`` cols, row-major data). :func:`as_matrix` is
the validating constructor; every operation re-checks finiteness of what it
promises to return.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "ShapeError",
    "NumericalError",
    "SymSpectrum",
    "as_matrix",
    "sym_eig",
    "svd",
    "solve_spd",
    "frobenius",
    "trace",
    "matmul",
    "transpose",
]

#: Relative symmetry slack accepted by :func:`sym_eig`.
SYMMETRY_RTOL = 1e-9


class ShapeError(ValueError):
    """Matrix has the wrong shape, or shapes do not conform."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (non-finite result, Cholesky breakdown)."""


def as_matrix(a, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate ``a`` as a finite 2-D float64 matrix and return it C-ordered.

    Optional ``rows``/``cols`` pin the expected shape.
    """
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {m.shape}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.isfinite(m).all():
        raise NumericalError("matrix contains NaN/Inf entries")
    return m


@dataclass(frozen=True)
class SymSpectrum:
    """Eigendecomposition of a symmetric matrix.

    ``eigenvalues`` are sorted non-increasing; ``eigenvectors`` holds the
    matching orthonormal eigenvectors as columns.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def sym_eig(m) -> SymSpectrum:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Raises :class:`ShapeError` for non-square or asymmetric input (symmetry
    is checked up to ``1e-9 * (1 + max|entry|)``).
    """
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"sym_eig needs a square matrix, got {m.shape}")
    scale = 1.0 + np.abs(m).max(initial=0.0)
    if np.abs(m - m.T).max(initial=0.0) > SYMMETRY_RTOL * scale:
        raise ShapeError("sym_eig needs a symmetric matrix")
    sym = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(sym)
    order = np.argsort(vals)[::-1]
    spectrum = SymSpectrum(np.ascontiguousarray(vals[order]),
                           np.ascontiguousarray(vecs[:, order]))
    if not np.isfinite(spectrum.eigenvalues).all():
        raise NumericalError("eigendecomposition produced non-finite values")
    return spectrum


def svd(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full SVD ``m = U @ diag(s) @ V.T``.

    Returns ``(U, s, V)`` with orthogonal ``U`` (rows×rows) and ``V``
    (cols×cols) and singular values descending.
    """
    m = as_matrix(m)
    u, s, vt = np.linalg.svd(m, full_matrices=True)
    return u, s, np.ascontiguousarray(vt.T)


def solve_spd(m, shift: float, rhs) -> np.ndarray:
    """Solve ``(m + shift*I) x = rhs`` for symmetric PSD ``m`` and ``shift > 0``.

    Uses a Cholesky factorization; breakdown (``m`` not PSD beyond tolerance)
    raises :class:`NumericalError`.
    """
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"solve_spd needs a square matrix, got {m.shape}")
    if not shift > 0:
        raise ValueError(f"shift must be positive, got {shift}")
    rhs = as_matrix(rhs, rows=m.shape[0])
    shifted = 0.5 * (m + m.T) + shift * np.eye(m.shape[0])
    try:
        factor = scipy.linalg.cho_factor(shifted, lower=True, check_finite=False)
        x = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky breakdown in shifted solve: {exc}") from exc
    if not np.isfinite(x).all():
        raise NumericalError("shifted solve produced non-finite values")
    return np.ascontiguousarray(x)


def frobenius(m) -> float:
    """Frobenius norm."""
    return float(np.linalg.norm(as_matrix(m)))


def trace(m) -> float:
    """Trace of a square matrix."""
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"trace needs a square matrix, got {m.shape}")
    return float(np.trace(m))


def matmul(a, b) -> np.ndarray:
    """Matrix product with conformance checking."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(m) -> np.ndarray:
    """Transpose."""
    return np.ascontiguousarray(as_matrix(m).T)
