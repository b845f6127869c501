"""Critical points of both coordinate flows and their stability.

Every critical point of the kappa-flows has coordinate form
``w* = Q [sum_p E_{p, i(p)}] M^(1/2)`` — an orthogonal mixing of one-mode
rows, each carrying an amplitude determined by a scalar *spectral filter* of
the mode's eigenvalue:

* kappa=0 (gradient flow): amplitude ``g(s, lam) = max(sqrt(s)-lam, 0)^(1/2)``
  on positive modes only;
* kappa=1 (stop-gradient flow): amplitude
  ``f_eps(s, lam) = 1/2 (|s| + eps sqrt(s^2-4lam)) * 1[s^2 >= 4 lam]``, a
  two-branch filter (eps=+1 the attracting branch, eps=-1 the repelling one)
  valid on modes of either sign.

The Jacobian of the field at such a point diagonalizes in closed form: the
eigenvalue attached to slot ``(p, j)`` falls into one of five cases (diagonal,
paired-mode, cross-mode, unused-row, and zero), implemented verbatim in
:func:`jacobian_spectrum_closed_form` and cross-checked against dense
central-difference Jacobians.  A point is classified stable when the minimal
eigenvalue is ``>= -1e-9`` (exact zeros arise from rotational degeneracy and
do not destabilize).  Repeated nonzero eigenvalues violate the assumptions of
the closed form and are refused.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .cca_oracle import CcaDecomposition, CoordinatePoint, operator_spectrum, from_coordinates
from .objectives import EncoderPair

__all__ = [
    "STABILITY_TOL",
    "EquilibriumSpec",
    "JacobianSpectrum",
    "StabilityReport",
    "filter_g",
    "filter_f",
    "mode_amplitudes",
    "build_coordinates",
    "build_equilibrium",
    "optimal_value",
    "top_mode_count",
    "jacobian_spectrum_closed_form",
    "jacobian_fd",
    "jacobian_fd_eigenvalues",
    "classify_stability",
    "is_stable_family",
    "enumerate_specs",
    "random_rotation",
    "spec_to_json",
    "report_to_json",
]

STABILITY_TOL = 1e-9
_GAP_TOL = 1e-9


def filter_g(c: float, lam: float) -> float:
    """Equilibrium amplitude of a positive mode under the gradient flow."""
    c = float(c)
    lam = float(lam)
    if c < 0.0:
        raise ValueError(f"filter input must be nonnegative, got {c}")
    if not 0.0 < lam < 1.0:
        raise ValueError(f"regularization must lie in (0, 1), got {lam}")
    return float(np.sqrt(max(np.sqrt(c) - lam, 0.0)))


def filter_f(c: float, lam: float, eps: int) -> float:
    """Two-branch equilibrium amplitude under the stop-gradient flow.

    ``eps=+1`` selects the attracting branch, ``eps=-1`` the repelling one;
    modes with ``c^2 < 4 lam`` are annihilated (value 0).
    """
    c = float(c)
    lam = float(lam)
    if eps not in (-1, 1):
        raise ValueError(f"branch sign must be -1 or +1, got {eps}")
    if lam <= 0.0:
        raise ValueError(f"regularization must be positive, got {lam}")
    disc = c * c - 4.0 * lam
    if disc < 0.0:
        return 0.0
    return float(0.5 * (abs(c) + eps * np.sqrt(disc)))


@dataclass(frozen=True)
class EquilibriumSpec:
    """Recipe for a critical point: mode indices, filter branches, mixing.

    ``indices`` select eigenvalue slots (into a value-descending spectrum);
    stored sorted increasing with ``branch_signs`` permuted along.  ``rotation``
    is an orthogonal k×k mixing (``None`` means identity).  kappa=0 specs take
    no branch signs (single filter); kappa=1 specs default to all +1.
    """

    kappa: int
    lam: float
    indices: tuple
    k: int
    branch_signs: tuple | None = None
    rotation: np.ndarray | None = None

    def __post_init__(self):
        if self.kappa not in (0, 1):
            raise ValueError(f"kappa must be 0 or 1, got {self.kappa}")
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"regularization must lie in (0, 1), got {self.lam}")
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise ValueError("mode indices must be distinct")
        if len(idx) > self.k:
            raise ValueError(f"{len(idx)} modes exceed feature dimension {self.k}")
        if any(i < 0 for i in idx):
            raise ValueError("mode indices must be nonnegative")
        signs = self.branch_signs
        if self.kappa == 0:
            if signs is not None:
                raise ValueError("branch signs apply only to kappa=1 specs")
        else:
            if signs is None:
                signs = (1,) * len(idx)
            signs = tuple(int(e) for e in signs)
            if len(signs) != len(idx):
                raise ValueError("branch signs must match the index count")
            if any(e not in (-1, 1) for e in signs):
                raise ValueError("branch signs must be -1 or +1")
        order = np.argsort(idx, kind="stable")
        idx = tuple(idx[i] for i in order)
        if signs is not None:
            signs = tuple(signs[i] for i in order)
        rot = self.rotation
        if rot is not None:
            rot = np.ascontiguousarray(rot, dtype=np.float64)
            if rot.shape != (self.k, self.k):
                raise ValueError(f"rotation must be {self.k}x{self.k}, got {rot.shape}")
            if np.abs(rot.T @ rot - np.eye(self.k)).max(initial=0.0) > 1e-12:
                raise ValueError("rotation is not orthogonal within 1e-12")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "branch_signs", signs)
        object.__setattr__(self, "rotation", rot)

    @property
    def r(self) -> int:
        return len(self.indices)


def _check_spectrum(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1:
        raise ValueError("eigenvalue list must be 1-D")
    nonzero = s[np.abs(s) > 1e-12]
    if nonzero.size >= 2:
        gaps = np.abs(np.subtract.outer(nonzero, nonzero))
        np.fill_diagonal(gaps, np.inf)
        if gaps.min() <= _GAP_TOL:
            raise ValueError(
                "repeated nonzero eigenvalues: closed-form Jacobian assumptions violated"
            )
    return s


def mode_amplitudes(spec: EquilibriumSpec, s: np.ndarray) -> np.ndarray:
    """Filter amplitude (coordinate magnitude) of each selected mode.

    Raises when a selected mode is annihilated by its filter — such a spec
    does not describe a distinct critical point.
    """
    s = np.asarray(s, dtype=np.float64)
    amps = np.empty(spec.r)
    for p, i in enumerate(spec.indices):
        if i >= s.shape[0]:
            raise ValueError(f"mode index {i} out of range for spectrum of size {s.shape[0]}")
        si = s[i]
        if spec.kappa == 0:
            if si <= 0.0:
                raise ValueError(f"gradient-flow equilibria use positive modes; s[{i}]={si}")
            amps[p] = filter_g(si, spec.lam)
        else:
            if abs(si) <= 1e-12:
                raise ValueError(f"mode {i} has zero eigenvalue; not a usable direction")
            amps[p] = filter_f(si, spec.lam, spec.branch_signs[p])
        if amps[p] <= 0.0:
            raise ValueError(
                f"mode {i} is annihilated by the filter (amplitude 0); drop it from the spec"
            )
    return amps


def build_coordinates(spec: EquilibriumSpec, s: np.ndarray) -> CoordinatePoint:
    """Coordinate matrix of the critical point described by the spec."""
    s = np.asarray(s, dtype=np.float64)
    amps = mode_amplitudes(spec, s)
    d = s.shape[0]
    base = np.zeros((spec.r, d))
    for p, i in enumerate(spec.indices):
        base[p, i] = amps[p]
    rot = spec.rotation if spec.rotation is not None else np.eye(spec.k)
    w = rot[:, :spec.r] @ base if spec.r else np.zeros((spec.k, d))
    return CoordinatePoint(w=w, S=s)


def build_equilibrium(cca: CcaDecomposition, spec: EquilibriumSpec) -> EncoderPair:
    """Function-space encoders of the critical point (via the operator basis)."""
    spectrum = operator_spectrum(cca)
    point = build_coordinates(spec, spectrum.s)
    return from_coordinates(point, spectrum)


def top_mode_count(c: np.ndarray, lam: float, k: int) -> int:
    """Largest r <= min(k, len(c)) with sqrt(c_r) > lam (modes surviving the filter)."""
    c = np.asarray(c, dtype=np.float64)
    r = 0
    for i in range(min(int(k), c.shape[0])):
        if np.sqrt(c[i]) > lam:
            r = i + 1
        else:
            break
    return r


def optimal_value(c: np.ndarray, lam: float, k: int) -> float:
    """Minimal objective value: ``-1/2 sum_(top modes) (sqrt(c_i) - lam)^2``."""
    c = np.asarray(c, dtype=np.float64)
    if not 0.0 < lam < 1.0:
        raise ValueError(f"regularization must lie in (0, 1), got {lam}")
    r = top_mode_count(c, lam, k)
    return float(-0.5 * np.sum((np.sqrt(c[:r]) - lam) ** 2))


@dataclass(frozen=True)
class JacobianSpectrum:
    """Closed-form eigenvalues of the linearized field at a critical point.

    ``mu[p, j]`` is the eigenvalue attached to row p and mode j; the critical
    point is stable when the minimum over all slots is ``>= -1e-9``.
    """

    mu: np.ndarray
    min_eigenvalue: float
    stable: bool

    def __post_init__(self):
        mu = np.ascontiguousarray(self.mu, dtype=np.float64)
        mn = float(mu.min()) if mu.size else 0.0
        if abs(mn - self.min_eigenvalue) > 1e-15:
            raise ValueError("min_eigenvalue does not match the table")
        if self.stable != (mn >= -STABILITY_TOL):
            raise ValueError("stability flag inconsistent with min eigenvalue")
        object.__setattr__(self, "mu", mu)

    def witness(self) -> dict | None:
        """Most negative slot as {p, j, mu}, or None when stable."""
        if self.stable:
            return None
        p, j = np.unravel_index(int(np.argmin(self.mu)), self.mu.shape)
        return {"p": int(p), "j": int(j), "mu": float(self.mu[p, j])}


def jacobian_spectrum_closed_form(spec: EquilibriumSpec, s: np.ndarray) -> JacobianSpectrum:
    """Closed-form eigenvalue table of the field Jacobian at the spec's point.

    Five cases for slot (p, j), with r occupied rows, occupied modes
    ``i(1) < ... < i(r)``, amplitudes-squared ``m_i``, and ``kap = kappa``:

    1. unused row, unoccupied mode:  ``1 - s_j / lam^2`` (kap=0) or ``1`` (kap=1);
    2. occupied row p, unoccupied mode j:
       ``delta = (s_i(p) - s_j) / (lam (m_i(p) + lam)) * [1 or m_i(p) s_i(p)]``;
    3. diagonal (j = i(p)):  ``4 m / (m + lam) - 2*[kap=1]``;
    4. occupied row p, occupied mode j = i(p') > i(p):  ``gamma_(p,p')``;
    5. remaining slots: 0 (rotational degeneracy).
    """
    s = _check_spectrum(s)
    lam = spec.lam
    kap = spec.kappa
    d = s.shape[0]
    k = spec.k
    r = spec.r
    amps = mode_amplitudes(spec, s)
    m = amps * amps                      # amplitude-squared per occupied row
    occupied = {i: p for p, i in enumerate(spec.indices)}

    def gamma(p: int, q: int) -> float:
        si, sj = s[spec.indices[p]], s[spec.indices[q]]
        mi, mj = m[p], m[q]
        if kap == 0:
            num = (mi + mj) * (np.sqrt(si) + np.sqrt(sj))
        else:
            num = (mi + mj) * (abs(si) * np.sqrt(mi) + abs(sj) * np.sqrt(mj) - si * sj)
        return float(num / ((mi + lam) * (mj + lam)))

    mu = np.zeros((k, d))
    for p in range(k):
        for j in range(d):
            if p >= r:
                if j in occupied:
                    mu[p, j] = 0.0
                else:
                    mu[p, j] = 1.0 - s[j] / lam**2 if kap == 0 else 1.0
                continue
            ip = spec.indices[p]
            if j == ip:
                mu[p, j] = 4.0 * m[p] / (m[p] + lam) - (2.0 if kap == 1 else 0.0)
            elif j in occupied:
                mu[p, j] = gamma(p, occupied[j]) if j > ip else 0.0
            else:
                scale = 1.0 if kap == 0 else m[p] * s[ip]
                mu[p, j] = (s[ip] - s[j]) / (lam * (m[p] + lam)) * scale
    mn = float(mu.min()) if mu.size else 0.0
    return JacobianSpectrum(mu=mu, min_eigenvalue=mn, stable=bool(mn >= -STABILITY_TOL))


def jacobian_fd(field, w0: CoordinatePoint, step: float | None = None) -> np.ndarray:
    """Dense central-difference Jacobian of a coordinate field at a critical point.

    ``field`` maps a k×d array to a k×d array.  Refuses points that are not
    critical (field norm >= 1e-9), since the closed form only applies there.
    """
    w = w0.w
    f0 = np.asarray(field(w), dtype=np.float64)
    norm0 = float(np.linalg.norm(f0))
    if norm0 >= 1e-9:
        raise ValueError(f"not a critical point: field norm {norm0:g} >= 1e-9")
    n = w.size
    if step is None:
        step = 1e-5 * (1.0 + float(np.linalg.norm(w)))
    jac = np.empty((n, n))
    flat = w.ravel()
    for b in range(n):
        bump = np.zeros(n)
        bump[b] = step
        fp = np.asarray(field((flat + bump).reshape(w.shape)), dtype=np.float64)
        fm = np.asarray(field((flat - bump).reshape(w.shape)), dtype=np.float64)
        jac[:, b] = (fp - fm).ravel() / (2.0 * step)
    return jac


def jacobian_fd_eigenvalues(field, w0: CoordinatePoint, step: float | None = None
                            ) -> np.ndarray:
    """Sorted real parts of the finite-difference Jacobian eigenvalues."""
    eig = np.linalg.eigvals(jacobian_fd(field, w0, step))
    return np.sort(eig.real)


@dataclass(frozen=True)
class StabilityReport:
    spec: EquilibriumSpec
    verdict: str
    min_mu: float
    witness: dict | None
    jacobian: JacobianSpectrum


def classify_stability(spec: EquilibriumSpec, cca: CcaDecomposition) -> StabilityReport:
    """Stable/unstable verdict from the closed-form Jacobian eigenvalues.

    Unstable verdicts carry the most negative (p, j, mu) slot as a witness.
    """
    spectrum = operator_spectrum(cca)
    _require_gaps(spectrum.s)
    jac = jacobian_spectrum_closed_form(spec, spectrum.s)
    verdict = "stable" if jac.stable else "unstable"
    return StabilityReport(spec=spec, verdict=verdict, min_mu=jac.min_eigenvalue,
                           witness=jac.witness(), jacobian=jac)


def _require_gaps(s: np.ndarray, tol: float = 1e-6) -> None:
    vals = np.asarray(s, dtype=np.float64)
    nonzero = vals[np.abs(vals) > 1e-12]
    if np.abs(nonzero).min(initial=np.inf) <= tol:
        raise ValueError("nonzero eigenvalues too close to zero for stable classification")
    if nonzero.size >= 2:
        gaps = np.abs(np.subtract.outer(nonzero, nonzero))
        np.fill_diagonal(gaps, np.inf)
        if gaps.min() <= tol:
            raise ValueError(f"eigenvalue gaps below {tol}; perturb the table first")


def is_stable_family(spec: EquilibriumSpec, s: np.ndarray) -> bool:
    """Membership test for the theoretically stable families.

    kappa=0: exactly the top block of filter-surviving positive modes, at
    full capacity.  kappa=1: any gap-free union of a top positive block and
    a bottom negative block, all on the attracting branch, all modes clearing
    the ``2 sqrt(lam)`` threshold (the empty set — total collapse — counts).
    """
    s = np.asarray(s, dtype=np.float64)
    d = s.shape[0]
    if spec.kappa == 0:
        n_pos = int(np.count_nonzero(s > 1e-12))
        r_max = top_mode_count(np.maximum(s[:n_pos], 0.0), spec.lam, spec.k)
        return spec.indices == tuple(range(r_max))
    if any(e != 1 for e in (spec.branch_signs or ())):
        return False
    thr = 2.0 * np.sqrt(spec.lam)
    if any(abs(s[i]) < thr for i in spec.indices):
        return False
    n_pos = int(np.count_nonzero(s > 1e-12))
    n_neg = int(np.count_nonzero(s < -1e-12))
    pos_part = tuple(i for i in spec.indices if s[i] > 0.0)
    neg_part = tuple(i for i in spec.indices if s[i] < 0.0)
    if len(pos_part) + len(neg_part) != spec.r:
        return False
    r_pos, r_neg = len(pos_part), len(neg_part)
    if r_pos > n_pos or r_neg > n_neg:
        return False
    return (pos_part == tuple(range(r_pos))
            and neg_part == tuple(range(d - r_neg, d)))


def enumerate_specs(s: np.ndarray, k: int, kappa: int, lam: float,
                    rotation: np.ndarray | None = None) -> list[EquilibriumSpec]:
    """All critical-point specs on the given spectrum, up to k modes.

    Only modes with a nonzero filter amplitude are usable; kappa=1 branches
    over every sign pattern.  The empty spec (total collapse) is included.
    """
    s = np.asarray(s, dtype=np.float64)
    if kappa == 0:
        eligible = [i for i in range(s.shape[0])
                    if s[i] > 1e-12 and filter_g(s[i], lam) > 0.0]
    else:
        eligible = [i for i in range(s.shape[0])
                    if abs(s[i]) > 1e-12 and filter_f(s[i], lam, 1) > 0.0]
    specs = []
    for size in range(0, min(k, len(eligible)) + 1):
        for subset in itertools.combinations(eligible, size):
            if kappa == 0:
                specs.append(EquilibriumSpec(kappa=0, lam=lam, indices=subset, k=k,
                                             rotation=rotation))
            else:
                for signs in itertools.product((1, -1), repeat=size):
                    usable = all(filter_f(s[i], lam, e) > 0.0
                                 for i, e in zip(subset, signs))
                    if usable:
                        specs.append(EquilibriumSpec(kappa=1, lam=lam, indices=subset,
                                                     k=k, branch_signs=signs,
                                                     rotation=rotation))
    return specs


def random_rotation(k: int, seed: int) -> np.ndarray:
    """Haar-ish random orthogonal k×k matrix (QR with sign fix), Philox-seeded."""
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    q, rmat = np.linalg.qr(gen.standard_normal((k, k)))
    return q * np.sign(np.diag(rmat))[None, :]


def spec_to_json(spec: EquilibriumSpec) -> dict:
    return {
        "kappa": spec.kappa,
        "lambda": spec.lam,
        "indices": list(spec.indices),
        "branch_signs": list(spec.branch_signs) if spec.branch_signs is not None else None,
        "k": spec.k,
        "rotation": spec.rotation.tolist() if spec.rotation is not None else None,
    }


def report_to_json(report: StabilityReport) -> dict:
    return {
        "spec": spec_to_json(report.spec),
        "verdict": report.verdict,
        "min_mu": report.min_mu,
        "witness": report.witness,
    }
