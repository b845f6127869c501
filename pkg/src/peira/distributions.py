"""Finite discrete joint distributions of paired views.

A :class:`JointTable` is an ``nx`` × ``ny`` probability table for a pair of
discrete views; every population expectation downstream is an exact weighted
sum over its cells, which is what lets the whole theory be checked to machine
precision. Constructors provide tables with analytically known correlation
structure (a correlated two-state pair, Kronecker products of factors) and a
tie-breaking perturbation; :func:`sample` draws i.i.d. pairs with a
counter-based RNG so every run is reproducible from its seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "JointTable",
    "SamplePairs",
    "make_two_state",
    "make_product",
    "perturb_distinct",
    "sample",
    "table_to_json",
    "table_from_json",
]

#: Absolute tolerance on the total probability mass.
MASS_ATOL = 1e-12

#: Default cap on nx*ny for product constructions.
PRODUCT_SIZE_CAP = 4096


def _rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) for reproducible draws."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


@dataclass(frozen=True)
class JointTable:
    """Joint distribution of two discrete views on {0..nx-1} × {0..ny-1}.

    Entries are nonnegative, sum to 1 (within ``MASS_ATOL``), and both
    marginals must be strictly positive so conditional expectations and the
    density ratio against the product of marginals exist everywhere.
    """

    p: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.p, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 2 or p.shape[1] < 2:
            raise ValueError(f"joint table must be at least 2x2, got shape {p.shape}")
        if not np.isfinite(p).all() or (p < 0).any():
            raise ValueError("joint table entries must be finite and nonnegative")
        if abs(p.sum() - 1.0) > MASS_ATOL:
            raise ValueError(f"joint table mass is {p.sum()!r}, expected 1")
        if (p.sum(axis=1) <= 0).any() or (p.sum(axis=0) <= 0).any():
            raise ValueError("joint table must have strictly positive marginals")
        object.__setattr__(self, "p", p)

    @property
    def nx(self) -> int:
        return self.p.shape[0]

    @property
    def ny(self) -> int:
        return self.p.shape[1]

    @property
    def px(self) -> np.ndarray:
        """Marginal of the first view."""
        return self.p.sum(axis=1)

    @property
    def py(self) -> np.ndarray:
        """Marginal of the second view."""
        return self.p.sum(axis=0)


@dataclass(frozen=True)
class SamplePairs:
    """I.i.d. draws from a joint table: aligned index lists plus their seed."""

    xs: np.ndarray
    ys: np.ndarray
    seed: int

    def __post_init__(self):
        xs = np.ascontiguousarray(self.xs, dtype=np.int64)
        ys = np.ascontiguousarray(self.ys, dtype=np.int64)
        if xs.shape != ys.shape or xs.ndim != 1:
            raise ValueError("xs and ys must be 1-D arrays of equal length")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def n(self) -> int:
        return self.xs.shape[0]


def make_two_state(rho: float) -> JointTable:
    """Two binary views with correlation ``rho``: p = [[(1+ρ)/4, (1−ρ)/4], ...].

    Marginals are uniform and the nonlinear canonical correlations are
    exactly {1, |ρ|}.
    """
    rho = float(rho)
    if not abs(rho) < 1:
        raise ValueError(f"two-state correlation must satisfy |rho| < 1, got {rho}")
    a = (1.0 + rho) / 4.0
    b = (1.0 - rho) / 4.0
    return JointTable(np.array([[a, b], [b, a]]))


def make_product(factors: list[JointTable], size_cap: int = PRODUCT_SIZE_CAP) -> JointTable:
    """Kronecker product of independent factor tables.

    The canonical-correlation multiset of the product is the multiset of all
    products of per-factor canonical correlations. Refuses products whose
    state space exceeds ``size_cap`` cells.
    """
    if not factors:
        raise ValueError("make_product needs at least one factor")
    p = factors[0].p
    for factor in factors[1:]:
        p = np.kron(p, factor.p)
        if p.size > size_cap:
            raise ValueError(
                f"product state space {p.shape[0]}x{p.shape[1]} exceeds cap {size_cap}"
            )
    if p.size > size_cap:
        raise ValueError(f"product state space exceeds cap {size_cap}")
    # Renormalize away accumulated rounding so the table invariant holds exactly.
    return JointTable(p / p.sum())


def perturb_distinct(table: JointTable, eps: float, seed: int) -> JointTable:
    """Mix ``table`` with an ``eps``-weighted random positive table.

    Used to break exact spectral ties that product constructions create, so
    the distinct-correlation assumptions of the equilibrium theory hold.
    ``eps = 0`` returns the table unchanged.
    """
    eps = float(eps)
    if not 0 <= eps <= 1e-2:
        raise ValueError(f"perturbation weight must lie in [0, 1e-2], got {eps}")
    if eps == 0.0:
        return table
    gen = _rng(seed)
    noise = gen.uniform(0.5, 1.5, size=table.p.shape)
    noise /= noise.sum()
    mixed = (1.0 - eps) * table.p + eps * noise
    return JointTable(mixed / mixed.sum())


def sample(table: JointTable, n: int, seed: int) -> SamplePairs:
    """Draw ``n`` i.i.d. pairs by inverse CDF over the flattened table."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    gen = _rng(seed)
    cdf = np.cumsum(table.p.ravel())
    cdf[-1] = 1.0
    flat = np.searchsorted(cdf, gen.random(n), side="right")
    xs, ys = np.divmod(flat, table.ny)
    return SamplePairs(xs=xs, ys=ys, seed=int(seed))


def table_to_json(table: JointTable) -> str:
    """Serialize as ``{"nx": ..., "ny": ..., "p": row-major list}``."""
    return json.dumps(
        {"nx": table.nx, "ny": table.ny, "p": table.p.ravel().tolist()}
    )


def table_from_json(text: str) -> JointTable:
    """Inverse of :func:`table_to_json` (strict: exactly the three keys)."""
    doc = json.loads(text)
    if not isinstance(doc, dict) or set(doc) != {"nx", "ny", "p"}:
        raise ValueError("joint-table JSON must have exactly the keys nx, ny, p")
    nx, ny = int(doc["nx"]), int(doc["ny"])
    p = np.asarray(doc["p"], dtype=np.float64)
    if p.shape != (nx * ny,):
        raise ValueError(f"expected {nx * ny} probabilities, got {p.shape}")
    return JointTable(p.reshape(nx, ny))
