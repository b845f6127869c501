"""Hot numerical kernels: coordinate vector fields and fixed-step RK4 chunks.

The coordinate flows run hundreds of thousands of tiny dense steps during
sweeps, so the inner loop is compiled with numba when available.  Setting the
environment variable ``PEIRA_NO_NUMBA=1`` (or any value other than ``0``)
before import forces the pure-numpy fallback; the same source runs either way
because ``njit`` degrades to a no-op decorator.  Numerical results of the two
paths agree to floating-point roundoff and the test suite pins that.

Kernel-level conventions:

* ``field(w, S, kappa, lam)`` returns the *unscaled* field
  ``F(w) = w - w G mid G`` with ``G = (w^T w + lam I)^{-1}`` and
  ``mid = diag(S)`` (kappa=0) or ``diag(S) (w^T w) diag(S)`` (kappa=1);
  the flow velocity is ``-lam * F(w)``.
* ``rk4_chunk`` advances a fixed number of classical RK4 steps and reports
  ``(state, steps_done, last_speed, status)`` with status 0 = ran all steps,
  1 = early stop (speed below tolerance), 2 = divergence (non-finite step
  rejected; the last finite state is returned).  A non-finite *starting*
  state is reported as status 2 immediately, before any linear solve runs.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["USING_NUMBA", "HAS_NUMBA", "coordinate_field_raw", "rk4_chunk"]

_DISABLED = os.environ.get("PEIRA_NO_NUMBA", "").strip() not in ("", "0")

if not _DISABLED:
    try:
        from numba import njit
        HAS_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a hard dep, but stay importable
        HAS_NUMBA = False
else:
    HAS_NUMBA = False

USING_NUMBA = HAS_NUMBA and not _DISABLED

if not USING_NUMBA:
    def njit(*args, **kwargs):  # noqa: F811 - fallback shim
        def deco(fn):
            return fn
        return deco


@njit(cache=True)
def _field(w, S, kappa, lam):
    """F(w) = w - w @ (G @ mid @ G); see module docstring."""
    d = w.shape[1]
    T = w.T @ w
    A = T.copy()
    for i in range(d):
        A[i, i] += lam
    G = np.linalg.solve(A, np.eye(d))
    if kappa == 0:
        mid_G = S.reshape(d, 1) * G          # diag(S) @ G
    else:
        mid_G = (S.reshape(d, 1) * T * S.reshape(1, d)) @ G
    return w - w @ (G @ mid_G)


@njit(cache=True)
def _chunk(w, S, kappa, lam, h, nsteps, stop_tol):
    w = w.copy()
    if not np.isfinite(w).all():
        return w, 0, np.nan, 2       # refuse to run the linear solves on garbage
    status = 0
    speed = -1.0
    done = 0
    for _ in range(nsteps):
        v1 = -lam * _field(w, S, kappa, lam)
        speed = np.sqrt(np.sum(v1 * v1))
        if speed < stop_tol:
            status = 1
            break
        v2 = -lam * _field(w + 0.5 * h * v1, S, kappa, lam)
        v3 = -lam * _field(w + 0.5 * h * v2, S, kappa, lam)
        v4 = -lam * _field(w + h * v3, S, kappa, lam)
        w_new = w + (h / 6.0) * (v1 + 2.0 * v2 + 2.0 * v3 + v4)
        if not np.isfinite(w_new).all():
            status = 2
            break
        w = w_new
        done += 1
    return w, done, speed, status


def coordinate_field_raw(w: np.ndarray, S: np.ndarray, kappa: int, lam: float) -> np.ndarray:
    """Kernel-path evaluation of the unscaled coordinate field F(w)."""
    return _field(np.ascontiguousarray(w, dtype=np.float64),
                  np.ascontiguousarray(S, dtype=np.float64), int(kappa), float(lam))


def rk4_chunk(w: np.ndarray, S: np.ndarray, kappa: int, lam: float, h: float,
              nsteps: int, stop_tol: float) -> tuple[np.ndarray, int, float, int]:
    """Advance up to ``nsteps`` RK4 steps of ``dw/dt = -lam F(w)``.

    Returns ``(state, steps_done, last_speed, status)``; ``last_speed`` is the
    flow speed ``lam * |F|_F`` at the start of the last attempted step.
    """
    return _chunk(np.ascontiguousarray(w, dtype=np.float64),
                  np.ascontiguousarray(S, dtype=np.float64),
                  int(kappa), float(lam), float(h), int(nsteps), float(stop_tol))


def warmup() -> None:
    """Trigger JIT compilation on a tiny problem (no-op on the numpy path)."""
    w = np.zeros((1, 2))
    S = np.array([1.0, -1.0])
    rk4_chunk(w, S, 0, 0.5, 0.01, 1, 0.0)
    rk4_chunk(w, S, 1, 0.5, 0.01, 1, 0.0)
