"""Exact nonlinear CCA on finite joint tables, and the paired-view operator basis.

For a finite joint table the canonical correlation structure is computed
exactly by a singular value decomposition of the normalized table
``B[x, y] = p(x, y) / sqrt(px(x) py(y))`` (correspondence analysis).  The
singular values are the canonical correlations ``c_i`` (the constant pair
``c_1 = 1`` included; nothing is mean-centered), and the singular vectors
divided by the root marginals are the canonical functions ``psi_i`` / ``xi_i``,
orthonormal in the marginal-weighted inner products.

The induced self-adjoint operator on pairs ``(a, b)`` of view functions,
``A(a, b) = (E[b(y)|x], E[a(x)|y])``, has eigenvalues ``+c_j`` and ``-c_j``
with eigenfunctions ``(psi_j, +-xi_j)/sqrt(2)``, plus a zero eigenspace
spanned by complements ``(phi, 0)`` and ``(0, chi)``.  Expanding an encoder
pair in this basis is an isometry onto k×d coordinate matrices; all flow and
stability theory downstream works in those coordinates.

Eigenvalues are stored sorted descending **by value** (positives first,
then zeros, then negatives closest to zero first), so that increasing index
sequences pick out top-positive and bottom-negative blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as scipy_linalg

from .distributions import JointTable
from .matstack import ShapeError, NumericalError
from .objectives import EncoderPair

__all__ = [
    "CcaDecomposition",
    "OperatorSpectrum",
    "CoordinatePoint",
    "exact_cca",
    "operator_spectrum",
    "coordinates_of",
    "from_coordinates",
    "principal_angles",
    "coordinate_principal_angles",
    "cca_to_json",
    "cca_from_json",
]

_RETAIN_TOL = 1e-12


@dataclass(frozen=True)
class CcaDecomposition:
    """Canonical correlations ``c`` with paired functions ``psi`` / ``xi``.

    ``psi`` is R×nx (row i = i-th canonical function on X), ``xi`` is R×ny;
    rows are orthonormal under the respective marginal-weighted inner
    products and cross-correlate as ``sum p(x,y) psi_i xi_j = c_i delta_ij``.
    """

    R: int
    c: np.ndarray
    psi: np.ndarray
    xi: np.ndarray
    px: np.ndarray
    py: np.ndarray

    def __post_init__(self):
        c = np.ascontiguousarray(self.c, dtype=np.float64)
        psi = np.ascontiguousarray(self.psi, dtype=np.float64)
        xi = np.ascontiguousarray(self.xi, dtype=np.float64)
        px = np.ascontiguousarray(self.px, dtype=np.float64)
        py = np.ascontiguousarray(self.py, dtype=np.float64)
        R = int(self.R)
        if c.shape != (R,) or psi.shape[0] != R or xi.shape[0] != R:
            raise ShapeError("canonical correlation count does not match function tables")
        if psi.shape[1] != px.shape[0] or xi.shape[1] != py.shape[0]:
            raise ShapeError("canonical function tables do not match marginals")
        if R < 1 or abs(c[0] - 1.0) > 1e-9:
            raise NumericalError("leading canonical correlation must be 1 (constant pair)")
        if np.any(np.diff(c) > 1e-12) or c[-1] <= 0.0 or c[0] > 1.0 + 1e-12:
            raise NumericalError("canonical correlations must be descending in (0, 1]")
        gram_psi = (psi * px) @ psi.T
        gram_xi = (xi * py) @ xi.T
        eye = np.eye(R)
        if (np.abs(gram_psi - eye).max(initial=0.0) > 1e-10
                or np.abs(gram_xi - eye).max(initial=0.0) > 1e-10):
            raise NumericalError("canonical functions are not marginal-orthonormal")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "px", px)
        object.__setattr__(self, "py", py)

    @property
    def nx(self) -> int:
        return self.psi.shape[1]

    @property
    def ny(self) -> int:
        return self.xi.shape[1]


@dataclass(frozen=True)
class OperatorSpectrum:
    """Full eigenbasis of the paired-view operator.

    ``s`` holds all ``d = nx + ny`` eigenvalues sorted descending by value;
    eigenvector i is the pair ``(za[i], zb[i])``, orthonormal in the
    marginal-weighted product inner product.
    """

    d: int
    s: np.ndarray
    za: np.ndarray
    zb: np.ndarray
    px: np.ndarray
    py: np.ndarray

    def __post_init__(self):
        s = np.ascontiguousarray(self.s, dtype=np.float64)
        za = np.ascontiguousarray(self.za, dtype=np.float64)
        zb = np.ascontiguousarray(self.zb, dtype=np.float64)
        px = np.ascontiguousarray(self.px, dtype=np.float64)
        py = np.ascontiguousarray(self.py, dtype=np.float64)
        d = int(self.d)
        if s.shape != (d,) or za.shape != (d, px.shape[0]) or zb.shape != (d, py.shape[0]):
            raise ShapeError("spectrum arrays do not match declared dimension")
        if d != px.shape[0] + py.shape[0]:
            raise ShapeError("dimension must equal nx + ny")
        if np.any(np.diff(s) > 1e-12):
            raise NumericalError("eigenvalues must be sorted descending by value")
        if np.abs(s).max(initial=0.0) > 1.0 + 1e-12:
            raise NumericalError("operator eigenvalues must lie in [-1, 1]")
        gram = (za * px) @ za.T + (zb * py) @ zb.T
        if np.abs(gram - np.eye(d)).max(initial=0.0) > 1e-9:
            raise NumericalError("eigenvector pairs are not orthonormal")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "za", za)
        object.__setattr__(self, "zb", zb)
        object.__setattr__(self, "px", px)
        object.__setattr__(self, "py", py)

    @property
    def nx(self) -> int:
        return self.px.shape[0]

    @property
    def ny(self) -> int:
        return self.py.shape[0]


@dataclass(frozen=True)
class CoordinatePoint:
    """Encoder pair expressed in the operator eigenbasis: ``w`` is k×d.

    ``S`` repeats the eigenvalue list of the basis the coordinates refer to,
    in the same order, so a point is self-describing for flow evaluation.
    """

    w: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.w, dtype=np.float64)
        S = np.ascontiguousarray(self.S, dtype=np.float64)
        if w.ndim != 2 or S.ndim != 1 or w.shape[1] != S.shape[0]:
            raise ShapeError(f"coordinate shapes incompatible: w {w.shape}, S {S.shape}")
        if not np.isfinite(w).all():
            raise NumericalError("coordinate matrix contains NaN/Inf")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "S", S)

    @property
    def k(self) -> int:
        return self.w.shape[0]

    @property
    def d(self) -> int:
        return self.w.shape[1]


def exact_cca(table: JointTable) -> CcaDecomposition:
    """Exact canonical decomposition of a finite joint table via SVD."""
    px, py = table.px, table.py
    if np.any(px <= 0.0) or np.any(py <= 0.0):
        raise ValueError("joint table has a zero marginal; canonical functions undefined")
    rx = np.sqrt(px)
    ry = np.sqrt(py)
    B = table.p / rx[:, None] / ry[None, :]
    u, s, vt = np.linalg.svd(B, full_matrices=False)
    order = _tie_stable_order(s, u)
    u, s, vt = u[:, order], s[order], vt[order, :]
    keep = s > _RETAIN_TOL
    u, s, vt = u[:, keep], s[keep], vt[keep, :]
    psi = (u / rx[:, None]).T
    xi = vt / ry[None, :]
    psi, xi = _fix_signs(psi, xi)
    s = np.minimum(s, 1.0)  # clip roundoff above the operator-norm bound
    return CcaDecomposition(R=int(s.shape[0]), c=s, psi=psi, xi=xi, px=px, py=py)


def _tie_stable_order(s: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Descending by singular value; exact ties broken by left-vector lex order."""
    idx = sorted(range(s.shape[0]), key=lambda i: (-s[i], tuple(u[:, i])))
    return np.asarray(idx, dtype=np.intp)


def _fix_signs(psi: np.ndarray, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First nonzero component of each psi row made positive; xi flips along."""
    psi = psi.copy()
    xi = xi.copy()
    for i in range(psi.shape[0]):
        row = psi[i]
        nonzero = np.flatnonzero(np.abs(row) > _RETAIN_TOL)
        if nonzero.size and row[nonzero[0]] < 0.0:
            psi[i] = -row
            xi[i] = -xi[i]
    return psi, xi


def _weighted_complement(rows: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Orthonormal (weighted) basis of the complement of the given row span.

    ``rows`` are orthonormal under ``<f, g> = sum_i weights[i] f[i] g[i]``;
    the returned (n - R)×n block completes them to a full basis.
    """
    n = weights.shape[0]
    r = rows.shape[0]
    if r >= n:
        return np.zeros((0, n))
    scaled = rows * np.sqrt(weights)          # orthonormal rows in Euclidean sense
    u, s, vt = np.linalg.svd(scaled, full_matrices=True)
    comp = vt[r:, :]                          # Euclidean-orthonormal complement
    return comp / np.sqrt(weights)[None, :]


def operator_spectrum(cca: CcaDecomposition) -> OperatorSpectrum:
    """Full ± eigenbasis of the paired-view operator from a canonical decomposition.

    Eigenpairs ``(+c_j, (psi_j, xi_j)/sqrt2)`` and ``(-c_j, (psi_j, -xi_j)/sqrt2)``
    for each retained correlation, plus zero modes supported on one view only.
    Stored descending by eigenvalue.
    """
    nx, ny, R = cca.nx, cca.ny, cca.R
    d = nx + ny
    root2 = np.sqrt(2.0)
    phi = _weighted_complement(cca.psi, cca.px)       # (nx - R) × nx
    chi = _weighted_complement(cca.xi, cca.py)        # (ny - R) × ny
    n_zero = phi.shape[0] + chi.shape[0]

    s = np.concatenate([cca.c, np.zeros(n_zero), -cca.c[::-1]])
    za = np.zeros((d, nx))
    zb = np.zeros((d, ny))
    za[:R] = cca.psi / root2
    zb[:R] = cca.xi / root2
    za[R:R + phi.shape[0]] = phi
    zb[R + phi.shape[0]:R + n_zero] = chi
    za[R + n_zero:] = cca.psi[::-1] / root2
    zb[R + n_zero:] = -cca.xi[::-1] / root2
    return OperatorSpectrum(d=d, s=s, za=za, zb=zb, px=cca.px, py=cca.py)


def coordinates_of(W: EncoderPair, spec: OperatorSpectrum) -> CoordinatePoint:
    """Expand an encoder pair in the operator eigenbasis (an isometry)."""
    if W.nx != spec.nx or W.ny != spec.ny:
        raise ShapeError(
            f"encoder tables ({W.nx}, {W.ny}) do not match spectrum ({spec.nx}, {spec.ny})"
        )
    w = W.U @ (spec.za * spec.px).T + W.V @ (spec.zb * spec.py).T
    return CoordinatePoint(w=w, S=spec.s)


def from_coordinates(point: CoordinatePoint, spec: OperatorSpectrum) -> EncoderPair:
    """Rebuild the encoder pair from its eigenbasis coordinates (exact inverse)."""
    if point.d != spec.d:
        raise ShapeError(f"coordinate dimension {point.d} does not match spectrum {spec.d}")
    U = point.w @ spec.za
    V = point.w @ spec.zb
    return EncoderPair(U=U, V=V, px=spec.px, py=spec.py)


def _subspace_angles(rows: np.ndarray, weights: np.ndarray,
                     target: np.ndarray, r: int) -> np.ndarray:
    """Principal angles between the span of ``rows`` and the first r ``target`` rows.

    Both spans live in the weighted inner product; ``target`` rows are already
    weighted-orthonormal.  Uses the sine-refined method (via scipy) so that
    near-zero angles keep full precision instead of flooring at sqrt(eps).
    Missing directions (rank-deficient ``rows``) show up as angles of pi/2.
    """
    root = np.sqrt(weights)
    scaled = rows * root[None, :]
    u, s, vt = np.linalg.svd(scaled, full_matrices=False)
    rank = int(np.count_nonzero(s > 1e-12 * (1.0 + s.max(initial=0.0))))
    basis = vt[:rank, :]                               # Euclidean-orthonormal span
    tgt = target[:r] * root[None, :]
    if rank:
        angles = scipy_linalg.subspace_angles(basis.T, tgt.T)
    else:
        angles = np.zeros(0)
    if angles.shape[0] < r:
        angles = np.concatenate([angles, np.full(r - angles.shape[0], np.pi / 2.0)])
    return np.sort(angles)[:r]


def principal_angles(W: EncoderPair, cca: CcaDecomposition, r: int
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Angles between encoder row spans and the top-r canonical subspaces.

    Returns ``(angles_u, angles_v)`` in radians, each length r, ascending;
    an encoder whose rows span the top-r canonical directions gives zeros.
    """
    r = int(r)
    if not 1 <= r <= cca.R:
        raise ValueError(f"requested subspace size {r} exceeds retained correlations {cca.R}")
    if W.nx != cca.nx or W.ny != cca.ny:
        raise ShapeError("encoder tables do not match canonical decomposition")
    angles_u = _subspace_angles(W.U, cca.px, cca.psi, r)
    angles_v = _subspace_angles(W.V, cca.py, cca.xi, r)
    return angles_u, angles_v


def coordinate_principal_angles(point: CoordinatePoint, r: int) -> np.ndarray:
    """Angles between the row span of ``w`` and the top-r eigenbasis axes.

    The joint-space analogue of :func:`principal_angles`: since the basis is
    orthonormal, the weighted geometry reduces to the Euclidean one on the
    coordinate matrix.  Length r, ascending; rank-deficient rows contribute
    pi/2 for the missing directions.
    """
    r = int(r)
    if not 1 <= r <= point.d:
        raise ValueError(f"requested subspace size {r} outside [1, {point.d}]")
    return _subspace_angles(point.w, np.ones(point.d), np.eye(point.d), r)


def cca_to_json(cca: CcaDecomposition) -> dict:
    """Plain-JSON form: canonical correlations and function tables only."""
    return {"c": cca.c.tolist(), "psi": cca.psi.tolist(), "xi": cca.xi.tolist()}


def cca_from_json(obj: dict, table: JointTable) -> CcaDecomposition:
    """Rebuild from :func:`cca_to_json` output; marginals re-attached from the table."""
    if set(obj.keys()) != {"c", "psi", "xi"}:
        raise ValueError(f"expected exactly keys c/psi/xi, got {sorted(obj.keys())}")
    c = np.asarray(obj["c"], dtype=np.float64)
    psi = np.asarray(obj["psi"], dtype=np.float64)
    xi = np.asarray(obj["xi"], dtype=np.float64)
    return CcaDecomposition(R=int(c.shape[0]), c=c, psi=psi, xi=xi,
                            px=table.px, py=table.py)
