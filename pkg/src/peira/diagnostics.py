"""Collapse and alignment diagnostics computed from features and moments.

Three label-free quantities summarize representation quality during training
and along flows:

* :func:`effective_rank` — exponential of the Shannon entropy of the
  normalized singular values of a feature matrix; 1 for rank-one (collapsed)
  features, d for isotropic ones.
* :func:`alignment` — per-eigenvector agreement between the signal matrix
  ``Sigma`` and the noise matrix ``N``: ``alpha_i = e_i^T N e_i /
  (|e_i| |N e_i|)`` over eigenvectors of ``Sigma``; all ones exactly when the
  two matrices commute (shared eigenbasis, as at every critical point).
* :func:`signal_spectrum` — eigenvalues of ``Sigma``, descending; new
  significant modes appearing over training indicate escaping collapse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matstack import sym_eig
from .objectives import Moments

__all__ = [
    "MetricsRow",
    "effective_rank",
    "alignment",
    "signal_spectrum",
    "active_modes",
]

_NULL_TOL = 1e-14


@dataclass(frozen=True)
class MetricsRow:
    """One logged diagnostic row (training step or flow time)."""

    step: float
    objective: float
    erank: float
    min_alignment: float
    principal_angle_max: float
    eta: float | None = None
    objective_population: float | None = None
    lyapunov: float | None = None
    field_norm: float | None = None

    def __post_init__(self):
        if self.erank < 1.0 - 1e-9:
            raise ValueError(f"effective rank below 1: {self.erank}")
        if not -1e-9 <= self.min_alignment <= 1.0 + 1e-9:
            raise ValueError(f"alignment outside [0, 1]: {self.min_alignment}")
        if not -1e-9 <= self.principal_angle_max <= np.pi / 2.0 + 1e-9:
            raise ValueError(f"principal angle outside [0, pi/2]: {self.principal_angle_max}")


def effective_rank(Z: np.ndarray) -> float:
    """exp(entropy) of the normalized singular values of a feature matrix.

    Zero singular values are excluded from the entropy sum; an all-zero
    matrix has no spectrum to normalize and is refused.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {Z.shape}")
    svals = np.linalg.svd(Z, compute_uv=False)
    total = svals.sum()
    if total <= 0.0:
        raise ValueError("all-zero feature matrix has undefined effective rank")
    p = svals / total
    p = p[p > 0.0]
    return float(np.exp(-np.sum(p * np.log(p))))


def alignment(m: Moments) -> np.ndarray:
    """Eigenvector agreement of N against each eigenvector of Sigma.

    Eigenvectors are taken in descending order of |eigenvalue| of Sigma.
    Directions annihilated by N (``|N e_i| < 1e-14``) are reported as 1:
    such an ``e_i`` is trivially an eigenvector of N.
    """
    spec = sym_eig(m.Sigma)
    order = np.argsort(-np.abs(spec.eigenvalues), kind="stable")
    vecs = spec.eigenvectors[:, order]
    alphas = np.empty(vecs.shape[1])
    for i in range(vecs.shape[1]):
        e = vecs[:, i]
        ne = m.N @ e
        nrm = float(np.linalg.norm(ne))
        if nrm < _NULL_TOL:
            alphas[i] = 1.0
        else:
            alphas[i] = float(e @ ne) / (float(np.linalg.norm(e)) * nrm)
    return np.clip(alphas, 0.0, 1.0)


def signal_spectrum(m: Moments) -> np.ndarray:
    """Eigenvalues of the signal matrix Sigma, descending by value."""
    return sym_eig(m.Sigma).eigenvalues


def active_modes(eigenvalues: np.ndarray, rel_tol: float = 1e-3) -> np.ndarray:
    """Boolean mask of eigenvalues with magnitude >= rel_tol * max magnitude."""
    vals = np.abs(np.asarray(eigenvalues, dtype=np.float64))
    peak = vals.max(initial=0.0)
    if peak <= 0.0:
        return np.zeros(vals.shape, dtype=bool)
    return vals >= rel_tol * peak
