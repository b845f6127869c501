"""Population-exact objectives and vector fields for paired tabular encoders.

An encoder pair ``W = (U, V)`` assigns a k-vector to every state of each
view; all expectations below are exact weighted sums over a
:class:`~peira.distributions.JointTable`. The central objects:

* signal matrix  ``Sigma = E[V(y)U(x)^T + U(x)V(y)^T]`` and noise matrix
  ``N = E[U(x)U(x)^T] + E[V(y)V(y)^T]``;
* the ridge-optimal linear predictor between embedded views,
  ``P = Sigma (N + lam I)^{-1}``, with resolvent ``Q = (N + lam I)^{-1}``;
* the scalar objective ``E(W) = -1/2 tr(P) + lam/2 (|U|^2 + |V|^2)`` whose
  minimizers span the top canonically-correlated directions;
* its exact gradient (obtained by differentiating an auxiliary loss with the
  predictor frozen), and the stop-gradient (self-distillation) semi-gradient
  field, which is *not* a gradient but admits a polynomial Lyapunov function.

Gradients and fields are returned in the geometry of the marginal-weighted
L2 inner product on encoders (the geometry in which the coordinate
reduction of :mod:`peira.cca_oracle` is an isometry). The sensitivity of the
objective to an individual table entry ``U[a, x]`` is therefore
``px(x) * grad.U[a, x]``, which is what finite-difference tests check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .distributions import JointTable
from .matstack import NumericalError, ShapeError, solve_spd

if TYPE_CHECKING:  # pragma: no cover - import only for annotations
    from .cca_oracle import CoordinatePoint

__all__ = [
    "EncoderPair",
    "Moments",
    "Predictor",
    "random_encoder_pair",
    "moments",
    "optimal_predictor",
    "peira_objective",
    "residual_objective",
    "aux_loss",
    "peira_gradient",
    "ssl_vector_field",
    "lyapunov",
    "lyapunov_from_moments",
    "lyapunov_gradient",
]


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 < lam < 1.0:
        raise ValueError(f"regularization must lie in (0, 1), got {lam}")
    return lam


@dataclass(frozen=True)
class EncoderPair:
    """Tabular encoders ``U`` (k×nx) and ``V`` (k×ny) plus the view marginals.

    The marginals are carried so squared norms are the exact population
    sums ``|U|^2 = sum_x px(x) |U(x)|^2`` (and likewise for ``V``).
    """

    U: np.ndarray
    V: np.ndarray
    px: np.ndarray
    py: np.ndarray

    def __post_init__(self):
        U = np.ascontiguousarray(self.U, dtype=np.float64)
        V = np.ascontiguousarray(self.V, dtype=np.float64)
        px = np.ascontiguousarray(self.px, dtype=np.float64)
        py = np.ascontiguousarray(self.py, dtype=np.float64)
        if U.ndim != 2 or V.ndim != 2 or U.shape[0] != V.shape[0]:
            raise ShapeError(
                f"encoder tables must be 2-D with equal feature dim, got {U.shape} / {V.shape}"
            )
        if px.shape != (U.shape[1],) or py.shape != (V.shape[1],):
            raise ShapeError("marginals do not match encoder table widths")
        if not (np.isfinite(U).all() and np.isfinite(V).all()):
            raise NumericalError("encoder tables contain NaN/Inf")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "px", px)
        object.__setattr__(self, "py", py)

    @classmethod
    def from_tables(cls, U, V, table: JointTable) -> "EncoderPair":
        return cls(U=np.asarray(U, dtype=np.float64),
                   V=np.asarray(V, dtype=np.float64),
                   px=table.px, py=table.py)

    @classmethod
    def zeros(cls, k: int, table: JointTable) -> "EncoderPair":
        return cls.from_tables(np.zeros((k, table.nx)), np.zeros((k, table.ny)), table)

    @property
    def k(self) -> int:
        return self.U.shape[0]

    @property
    def nx(self) -> int:
        return self.U.shape[1]

    @property
    def ny(self) -> int:
        return self.V.shape[1]

    def sq_norm_u(self) -> float:
        """Exact population squared norm ``sum_x px(x) |U(x)|^2``."""
        return float((self.U * self.U).sum(axis=0) @ self.px)

    def sq_norm_v(self) -> float:
        return float((self.V * self.V).sum(axis=0) @ self.py)

    def norm(self) -> float:
        """Norm of the stacked pair in the marginal-weighted geometry."""
        return float(np.sqrt(self.sq_norm_u() + self.sq_norm_v()))

    def with_tables(self, U, V) -> "EncoderPair":
        """Same marginals, new tables (used by flows and arithmetic)."""
        return EncoderPair(U=U, V=V, px=self.px, py=self.py)


def random_encoder_pair(table: JointTable, k: int, scale: float, seed: int) -> EncoderPair:
    """Gaussian-random pair with entries ~ N(0, scale^2), Philox-seeded."""
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    U = scale * gen.standard_normal((k, table.nx))
    V = scale * gen.standard_normal((k, table.ny))
    return EncoderPair.from_tables(U, V, table)


@dataclass(frozen=True)
class Moments:
    """Signal matrix ``Sigma`` (symmetric) and noise matrix ``N`` (PSD)."""

    Sigma: np.ndarray
    N: np.ndarray

    def __post_init__(self):
        Sigma = np.ascontiguousarray(self.Sigma, dtype=np.float64)
        N = np.ascontiguousarray(self.N, dtype=np.float64)
        if Sigma.shape != N.shape or Sigma.ndim != 2 or Sigma.shape[0] != Sigma.shape[1]:
            raise ShapeError("Sigma and N must be square matrices of equal size")
        if np.abs(Sigma - Sigma.T).max(initial=0.0) > 1e-12 * (1.0 + np.abs(Sigma).max(initial=0.0)):
            raise NumericalError("Sigma must be symmetric")
        if np.linalg.eigvalsh(0.5 * (N + N.T)).min(initial=0.0) < -1e-10:
            raise NumericalError("N must be positive semi-definite")
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "N", N)


@dataclass(frozen=True)
class Predictor:
    """Ridge-optimal predictor ``P = Sigma Q`` with resolvent ``Q = (N + lam I)^{-1}``."""

    P: np.ndarray
    Q: np.ndarray
    lam: float


def moments(W: EncoderPair, table: JointTable) -> Moments:
    """Exact signal/noise second moments of the pair under the table."""
    _check_pair_table(W, table)
    cross = (W.V @ table.p.T) @ W.U.T          # E[V(y) U(x)^T]
    Sigma = cross + cross.T
    mu = (W.U * table.px) @ W.U.T              # E[U(x) U(x)^T]
    mv = (W.V * table.py) @ W.V.T
    N = mu + mv
    return Moments(Sigma=0.5 * (Sigma + Sigma.T), N=0.5 * (N + N.T))


def optimal_predictor(m: Moments, lam: float) -> Predictor:
    """Closed-form optimum of the ridge regression between embedded views."""
    lam = _check_lambda(lam)
    k = m.N.shape[0]
    Q = solve_spd(m.N, lam, np.eye(k))
    Q = 0.5 * (Q + Q.T)
    resid = np.abs(Q @ (m.N + lam * np.eye(k)) - np.eye(k)).max(initial=0.0)
    if resid > 1e-10:
        raise NumericalError(f"resolvent residual {resid:g} exceeds tolerance")
    return Predictor(P=m.Sigma @ Q, Q=Q, lam=lam)


def peira_objective(W: EncoderPair, table: JointTable, lam: float) -> float:
    """``-1/2 tr(P) + lam/2 (|U|^2 + |V|^2)`` with exact population sums."""
    lam = _check_lambda(lam)
    pred = optimal_predictor(moments(W, table), lam)
    return float(-0.5 * np.trace(pred.P) + 0.5 * lam * (W.sq_norm_u() + W.sq_norm_v()))


def residual_objective(W: EncoderPair, table: JointTable, lam: float,
                       pred: Predictor | None = None) -> float:
    """Symmetrized ridge-regression residual at the (given or optimal) predictor.

    ``1/2 E|P U(x) - V(y)|^2 + 1/2 E|P V(y) - U(x)|^2
    + lam/2 (|U|^2 + |V|^2) + lam/2 |P|_F^2``.
    """
    lam = _check_lambda(lam)
    _check_pair_table(W, table)
    if pred is None:
        pred = optimal_predictor(moments(W, table), lam)
    P = pred.P
    PU = P @ W.U
    PV = P @ W.V
    sq_pu = float((PU * PU).sum(axis=0) @ table.px)
    sq_pv = float((PV * PV).sum(axis=0) @ table.py)
    cross_uv = float(np.sum((PU @ table.p) * W.V))   # E <P U(x), V(y)>
    cross_vu = float(np.sum((PV @ table.p.T) * W.U))  # E <P V(y), U(x)>
    sq_u = W.sq_norm_u()
    sq_v = W.sq_norm_v()
    fit = 0.5 * (sq_pu - 2.0 * cross_uv + sq_v) + 0.5 * (sq_pv - 2.0 * cross_vu + sq_u)
    return float(fit + 0.5 * lam * (sq_u + sq_v) + 0.5 * lam * float(np.sum(P * P)))


def aux_loss(W: EncoderPair, pred: Predictor, table: JointTable, lam: float) -> float:
    """Auxiliary loss at a frozen predictor pair ``(P, Q)``.

    ``1/2 E[U^T Q (P U - V) + V^T Q (P V - U)] + lam/2 (|U|^2 + |V|^2)``,
    evaluated through its trace form
    ``1/2 tr((Q P + lam I) N) - 1/2 tr(Q Sigma)``.
    """
    lam = _check_lambda(lam)
    m = moments(W, table)
    k = m.N.shape[0]
    return float(0.5 * np.trace((pred.Q @ pred.P + lam * np.eye(k)) @ m.N)
                 - 0.5 * np.trace(pred.Q @ m.Sigma))


def _conditional_means(W: EncoderPair, table: JointTable) -> tuple[np.ndarray, np.ndarray]:
    """``Vbar(x) = E[V(y)|x]`` (k×nx) and ``Ubar(y) = E[U(x)|y]`` (k×ny)."""
    cond_y_given_x = table.p / table.px[:, None]
    cond_x_given_y = table.p / table.py[None, :]
    vbar = W.V @ cond_y_given_x.T
    ubar = W.U @ cond_x_given_y
    return vbar, ubar


def peira_gradient(W: EncoderPair, table: JointTable, lam: float) -> EncoderPair:
    """Exact gradient of the objective in the marginal-weighted geometry.

    Per point: ``grad_U(x) = (Q Sigma Q + lam I) U(x) - Q Vbar(x)`` and
    symmetrically for V, with the predictor resolved at the current pair.
    The sensitivity of the objective to the table entry ``U[a, x]`` is
    ``px(x) * grad.U[a, x]``.
    """
    lam = _check_lambda(lam)
    m = moments(W, table)
    pred = optimal_predictor(m, lam)
    K = pred.Q @ m.Sigma @ pred.Q            # = 1/2 (Q P + P^T Q), exactly symmetric
    K = 0.5 * (K + K.T)
    vbar, ubar = _conditional_means(W, table)
    grad_u = K @ W.U + lam * W.U - pred.Q @ vbar
    grad_v = K @ W.V + lam * W.V - pred.Q @ ubar
    return W.with_tables(grad_u, grad_v)


def ssl_vector_field(W: EncoderPair, table: JointTable, lam: float) -> EncoderPair:
    """Stop-gradient (self-distillation) semi-gradient field.

    The predictor is resolved at the current pair and then *frozen*; only the
    student branch of each squared residual is differentiated:
    ``field_U(x) = P^T (P U(x) - Vbar(x)) + lam U(x)`` and symmetrically.
    Not a gradient field, but dissipates the quartic Lyapunov function.
    """
    lam = _check_lambda(lam)
    m = moments(W, table)
    pred = optimal_predictor(m, lam)
    vbar, ubar = _conditional_means(W, table)
    Pt = pred.P.T
    field_u = Pt @ (pred.P @ W.U - vbar) + lam * W.U
    field_v = Pt @ (pred.P @ W.V - ubar) + lam * W.V
    return W.with_tables(field_u, field_v)


def _lyapunov_terms(gram: np.ndarray, signal: np.ndarray, kappa: int, lam: float) -> float:
    shifted = gram + lam * np.eye(gram.shape[0])
    cubic = float(np.trace(shifted @ shifted @ shifted)) / 3.0
    power = signal if kappa == 0 else signal @ signal
    return cubic - float(np.trace(power)) / (kappa + 1.0)


def _check_kappa(kappa: int) -> int:
    if kappa not in (0, 1):
        raise ValueError(f"kappa must be 0 or 1, got {kappa}")
    return int(kappa)


def lyapunov(w: "CoordinatePoint", kappa: int, lam: float) -> float:
    """Lyapunov polynomial in coordinates.

    ``L(w) = 1/3 tr((w w^T + lam I)^3) - 1/(kappa+1) tr((w S w^T)^(kappa+1))``.
    It is non-increasing along the matching flow; at ``w = 0`` it equals
    ``(k/3) lam^3``.
    """
    kappa = _check_kappa(kappa)
    lam = _check_lambda(lam)
    warr = np.asarray(w.w, dtype=np.float64)
    svec = np.asarray(w.S, dtype=np.float64)
    return _lyapunov_terms(warr @ warr.T, (warr * svec) @ warr.T, kappa, lam)


def lyapunov_from_moments(m: Moments, kappa: int, lam: float) -> float:
    """Function-space form of the Lyapunov polynomial.

    Equals the coordinate form because ``w w^T = N`` and ``w S w^T = Sigma``
    under the isometric coordinate map:
    ``1/3 tr((N + lam I)^3) - 1/(kappa+1) tr(Sigma^(kappa+1))``.
    """
    kappa = _check_kappa(kappa)
    lam = _check_lambda(lam)
    return _lyapunov_terms(m.N, m.Sigma, kappa, lam)


def lyapunov_gradient(w_arr: np.ndarray, S: np.ndarray, kappa: int, lam: float) -> np.ndarray:
    """Euclidean gradient of the Lyapunov polynomial at coordinate matrix ``w``.

    ``grad L = 2 (w w^T + lam I)^2 w - 2 (w S w^T)^kappa w S``.
    """
    kappa = _check_kappa(kappa)
    lam = _check_lambda(lam)
    w = np.asarray(w_arr, dtype=np.float64)
    svec = np.asarray(S, dtype=np.float64)
    shifted = w @ w.T + lam * np.eye(w.shape[0])
    ws = w * svec
    if kappa == 0:
        signal_part = ws
    else:
        signal_part = (ws @ w.T) @ ws
    return 2.0 * (shifted @ shifted @ w - signal_part)


def _check_pair_table(W: EncoderPair, table: JointTable) -> None:
    if W.nx != table.nx or W.ny != table.ny:
        raise ShapeError(
            f"encoder tables ({W.nx}, {W.ny}) do not match joint table ({table.nx}, {table.ny})"
        )
