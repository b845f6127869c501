"""Deterministic integration of the two encoder flows, with trajectory logging.

Two continuous-time dynamics are integrated with classical fixed-step RK4:

* ``kind="peira"`` — the exact gradient flow of the predictor-trace
  objective, ``dW/dt = -grad E(W)``; in operator-basis coordinates this is
  ``dw/dt = -lam * F(w)`` with the kappa=0 field.
* ``kind="ssl"`` — the stop-gradient (self-distillation) dynamics,
  ``dW/dt = -field(W)`` with the semi-gradient field; in coordinates the
  kappa=1 field.

Both can be run in function space (tables, exact population sums) or in
coordinate space (k×d matrices, compiled kernels).  Matched initial
conditions give matching trajectories — the coordinate map is an isometry
intertwining the fields — and the test suite pins this equivalence.

Logged per snapshot: time, scalar objective, Lyapunov value, field norm
(the actual flow speed), and the singular values of the state in the
marginal-weighted geometry.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import kernels
from .cca_oracle import CoordinatePoint, OperatorSpectrum
from .distributions import JointTable
from .matstack import solve_spd
from .objectives import (
    EncoderPair,
    lyapunov,
    lyapunov_from_moments,
    moments,
    optimal_predictor,
    peira_gradient,
    ssl_vector_field,
)

__all__ = [
    "KIND_TO_KAPPA",
    "FlowConfig",
    "Trajectory",
    "FlowDivergenceError",
    "coordinate_field",
    "integrate_function_flow",
    "integrate_coordinate_flow",
]

KIND_TO_KAPPA = {"peira": 0, "ssl": 1}


@dataclass(frozen=True)
class FlowConfig:
    """Integration parameters; ``step`` is capped at ``lam / 8`` because the
    gradient field is Lipschitz with constant ``4 / lam``."""

    kind: str
    lam: float
    step: float
    t_end: float
    log_every: int = 50
    stop_grad_norm: float = 1e-10

    def __post_init__(self):
        if self.kind not in KIND_TO_KAPPA:
            raise ValueError(f"kind must be one of {sorted(KIND_TO_KAPPA)}, got {self.kind!r}")
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"regularization must lie in (0, 1), got {self.lam}")
        if not self.step > 0.0:
            raise ValueError("step must be positive")
        if self.step > self.lam / 8.0 + 1e-15:
            raise ValueError(f"step {self.step} exceeds stability cap {self.lam / 8.0}")
        if not self.t_end > 0.0:
            raise ValueError("t_end must be positive")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.stop_grad_norm < 0.0:
            raise ValueError("stop_grad_norm must be >= 0")

    @property
    def kappa(self) -> int:
        return KIND_TO_KAPPA[self.kind]

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.t_end / self.step)))


@dataclass
class Trajectory:
    """Logged history of one integrated flow."""

    kind: str
    kappa: int
    times: np.ndarray
    objective: np.ndarray
    lyapunov: np.ndarray
    field_norm: np.ndarray
    svals: np.ndarray
    snapshots: list = dataclass_field(default_factory=list)
    converged: bool = False

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0.0):
            raise ValueError("logged times must be strictly increasing")
        n = self.times.shape[0]
        if not (self.objective.shape[0] == self.lyapunov.shape[0]
                == self.field_norm.shape[0] == self.svals.shape[0]
                == len(self.snapshots) == n):
            raise ValueError("trajectory column lengths disagree")

    @property
    def final(self):
        return self.snapshots[-1]

    def to_csv(self, path, include_svals: bool = True) -> None:
        """Write ``t, objective, lyapunov, field_norm[, sval_i...]`` rows."""
        n_sv = self.svals.shape[1] if include_svals else 0
        header = ["t", "objective", "lyapunov", "field_norm"] + [
            f"sval_{i + 1}" for i in range(n_sv)
        ]
        with open(path, "w", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for i in range(self.times.shape[0]):
                row = [repr(float(self.times[i])), repr(float(self.objective[i])),
                       repr(float(self.lyapunov[i])), repr(float(self.field_norm[i]))]
                row += [repr(float(v)) for v in self.svals[i, :n_sv]]
                writer.writerow(row)


class FlowDivergenceError(ArithmeticError):
    """A step produced non-finite state; the last finite prefix is retained."""

    def __init__(self, message: str, trajectory: Trajectory, last_time: float):
        super().__init__(message)
        self.trajectory = trajectory
        self.last_time = last_time


def coordinate_field(w: CoordinatePoint, kappa: int, lam: float) -> np.ndarray:
    """Unscaled coordinate field ``F(w) = w (I - G S (T S)^kappa G)``.

    ``T = w^T w`` and ``G = (T + lam I)^{-1}`` computed by a Cholesky solve.
    The flow velocity is ``-lam * F(w)``.  The compiled kernel evaluates the
    same expression; both paths are cross-checked in the tests.
    """
    if kappa not in (0, 1):
        raise ValueError(f"kappa must be 0 or 1, got {kappa}")
    arr = w.w
    d = arr.shape[1]
    T = arr.T @ arr
    G = solve_spd(T, lam, np.eye(d))
    if kappa == 0:
        mid_g = w.S[:, None] * G
    else:
        mid_g = (w.S[:, None] * T * w.S[None, :]) @ G
    return arr - arr @ (G @ mid_g)


class _Logger:
    def __init__(self, kind: str, kappa: int):
        self.kind = kind
        self.kappa = kappa
        self.times: list[float] = []
        self.objective: list[float] = []
        self.lyapunov: list[float] = []
        self.field_norm: list[float] = []
        self.svals: list[np.ndarray] = []
        self.snapshots: list = []

    def add(self, t, obj, lya, fnorm, svals, snapshot) -> None:
        self.times.append(float(t))
        self.objective.append(float(obj))
        self.lyapunov.append(float(lya))
        self.field_norm.append(float(fnorm))
        self.svals.append(np.asarray(svals, dtype=np.float64))
        self.snapshots.append(snapshot)

    def build(self, converged: bool) -> Trajectory:
        return Trajectory(
            kind=self.kind,
            kappa=self.kappa,
            times=np.asarray(self.times),
            objective=np.asarray(self.objective),
            lyapunov=np.asarray(self.lyapunov),
            field_norm=np.asarray(self.field_norm),
            svals=np.vstack(self.svals) if self.svals else np.zeros((0, 0)),
            snapshots=self.snapshots,
            converged=converged,
        )


def _pair_norm(U: np.ndarray, V: np.ndarray, px: np.ndarray, py: np.ndarray) -> float:
    return float(np.sqrt((U * U).sum(axis=0) @ px + (V * V).sum(axis=0) @ py))


def _weighted_svals(U, V, px, py) -> np.ndarray:
    stacked = np.hstack([U * np.sqrt(px), V * np.sqrt(py)])
    return np.linalg.svd(stacked, compute_uv=False)


def integrate_function_flow(W0: EncoderPair, table: JointTable, cfg: FlowConfig) -> Trajectory:
    """RK4 on ``dW/dt = -field(W)`` over exact population sums."""
    if W0.nx != table.nx or W0.ny != table.ny:
        raise ValueError("initial encoders do not match the table")
    field_fn = peira_gradient if cfg.kind == "peira" else ssl_vector_field
    px, py = table.px, table.py
    h = cfg.step
    U, V = W0.U.copy(), W0.V.copy()
    log = _Logger(cfg.kind, cfg.kappa)
    converged = False

    def pair(u, v):
        return W0.with_tables(u, v)

    def log_state(t, u, v, fld):
        m = moments(pair(u, v), table)
        pred = optimal_predictor(m, cfg.lam)
        obj = float(-0.5 * np.trace(pred.P)
                    + 0.5 * cfg.lam * ((u * u).sum(axis=0) @ px + (v * v).sum(axis=0) @ py))
        lya = lyapunov_from_moments(m, cfg.kappa, cfg.lam)
        fnorm = _pair_norm(fld.U, fld.V, px, py)
        log.add(t, obj, lya, fnorm, _weighted_svals(u, v, px, py), pair(u, v))
        return fnorm

    fld = field_fn(pair(U, V), table, cfg.lam)
    log_state(0.0, U, V, fld)
    step_idx = 0
    while step_idx < cfg.n_steps:
        fnorm = _pair_norm(fld.U, fld.V, px, py)
        if fnorm < cfg.stop_grad_norm:
            converged = True
            break
        k1u, k1v = -fld.U, -fld.V
        f2 = field_fn(pair(U + 0.5 * h * k1u, V + 0.5 * h * k1v), table, cfg.lam)
        f3 = field_fn(pair(U - 0.5 * h * f2.U, V - 0.5 * h * f2.V), table, cfg.lam)
        f4 = field_fn(pair(U - h * f3.U, V - h * f3.V), table, cfg.lam)
        U_new = U + (h / 6.0) * (k1u - 2.0 * f2.U - 2.0 * f3.U - f4.U)
        V_new = V + (h / 6.0) * (k1v - 2.0 * f2.V - 2.0 * f3.V - f4.V)
        if not (np.isfinite(U_new).all() and np.isfinite(V_new).all()):
            last_t = step_idx * h
            raise FlowDivergenceError(
                f"non-finite state at t={last_t + h:g}", log.build(False), last_t
            )
        U, V = U_new, V_new
        step_idx += 1
        fld = field_fn(pair(U, V), table, cfg.lam)
        if step_idx % cfg.log_every == 0 or step_idx == cfg.n_steps:
            log_state(step_idx * h, U, V, fld)
    if step_idx * h > log.times[-1] + 1e-15:
        log_state(step_idx * h, U, V, fld)
    return log.build(converged)


def _coord_metrics(w: np.ndarray, S: np.ndarray, kappa: int, lam: float):
    point = CoordinatePoint(w=w, S=S)
    k = w.shape[0]
    n_mat = w @ w.T
    sigma = (w * S) @ w.T
    Q = solve_spd(n_mat, lam, np.eye(k))
    obj = float(-0.5 * np.trace(sigma @ Q) + 0.5 * lam * np.trace(n_mat))
    lya = lyapunov(point, kappa, lam)
    fnorm = lam * float(np.linalg.norm(kernels.coordinate_field_raw(w, S, kappa, lam)))
    svals = np.linalg.svd(w, compute_uv=False)
    return obj, lya, fnorm, svals, point


def integrate_coordinate_flow(w0: CoordinatePoint, spec: OperatorSpectrum | None,
                              cfg: FlowConfig) -> Trajectory:
    """RK4 on ``dw/dt = -lam F(w)`` using the compiled kernel path."""
    if spec is not None:
        if spec.d != w0.d or np.abs(spec.s - w0.S).max(initial=0.0) > 1e-12:
            raise ValueError("coordinate point does not belong to the given basis")
    S = w0.S
    kappa = cfg.kappa
    w = w0.w.copy()
    h = cfg.step
    log = _Logger(cfg.kind, kappa)
    log.add(0.0, *_coord_metrics(w, S, kappa, cfg.lam)[:4],
            CoordinatePoint(w=w.copy(), S=S))
    done_total = 0
    converged = False
    while done_total < cfg.n_steps:
        chunk = min(cfg.log_every, cfg.n_steps - done_total)
        w_new, done, _speed, status = kernels.rk4_chunk(
            w, S, kappa, cfg.lam, h, chunk, cfg.stop_grad_norm
        )
        done_total += done
        w = w_new
        t = done_total * h
        if status == 2:
            obj, lya, fnorm, svals, point = _coord_metrics(w, S, kappa, cfg.lam)
            if t > log.times[-1]:
                log.add(t, obj, lya, fnorm, svals, point)
            raise FlowDivergenceError(f"non-finite state near t={t:g}", log.build(False), t)
        obj, lya, fnorm, svals, point = _coord_metrics(w, S, kappa, cfg.lam)
        if t > log.times[-1]:
            log.add(t, obj, lya, fnorm, svals, point)
        if status == 1:
            converged = True
            break
    return log.build(converged)
