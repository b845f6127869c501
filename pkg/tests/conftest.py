"""Shared fixtures and frozen reference constants for the test suite.

The constants below were derived independently (closed-form arithmetic and
high-precision evaluation of the filter formulas) and are frozen here so the
tests compare the package against fixed numbers, not against itself.
"""

from __future__ import annotations

import numpy as np
import pytest

from peira import (
    exact_cca,
    make_product,
    make_two_state,
    operator_spectrum,
    perturb_distinct,
)

# --- frozen scalar references ------------------------------------------------

ROOT_06 = 0.7745966692414834            # sqrt(0.6)

# gradient-flow filter amplitudes, lam = 0.2
G_1_02 = 0.8944271909999159             # sqrt(1 - 0.2)
G_06_02 = 0.7580215493252704            # sqrt(sqrt(0.6) - 0.2)

# stop-gradient filter amplitudes (attracting / repelling branch)
F1_1_005 = 0.9472135954999579           # (1 + sqrt(1 - 0.2)) / 2
FM1_1_005 = 0.05278640450004207         # (1 - sqrt(1 - 0.2)) / 2
F1_06_005 = 0.5                         # (0.6 + sqrt(0.36 - 0.2)) / 2
FM1_06_005 = 0.1

# optimal objective value on correlations {1, 0.6} at lam = 0.2
OPTIMUM_K2 = -0.4850806661517034        # -((1-0.2)^2 + (sqrt(0.6)-0.2)^2) / 2
OPTIMUM_K1 = -0.32                      # -(1-0.2)^2 / 2

# second moments at the capacity-2 gradient-flow equilibrium (lam = 0.2)
EQ_N_EIGS = (0.8, 0.5745966692414834)          # sqrt(c_i) - lam
EQ_SIGMA_EIGS = (0.8, 0.34475800154489006)     # c_i (sqrt(c_i) - lam)
EQ_P_EIGS = (0.8, 0.4450806661517034)          # (sqrt(c_i) - lam) sqrt(c_i)

# single-feature sign-encoder example on the two-state table (lam = 0.5)
K1_SIGMA = 1.2
K1_N = 2.0
K1_P = 0.48
K1_Q = 0.4
K1_OBJECTIVE = 0.26
K1_RESIDUAL = 1.212  # (0.48^2 - 2*0.48*0.6 + 1) + 0.25*2 + 0.25*0.48^2

# linearization eigenvalue table at the capacity-2 gradient-flow equilibrium
# (two-state table, lam = 0.2): sorted multiset of all k*d = 8 slots
MU_TOP2_KAPPA0 = (
    0.0,
    2.9672044410113556,
    3.1491933384829673,
    3.2,
    7.745966692414832,
    8.0,
    10.0,
    10.327955589886443,
)

# --- shared tables and decompositions -----------------------------------------


@pytest.fixture(scope="session")
def two_state():
    """The canonical correlated binary pair, rho = 0.6."""
    return make_two_state(0.6)


@pytest.fixture(scope="session")
def cca2(two_state):
    return exact_cca(two_state)


@pytest.fixture(scope="session")
def spec2(cca2):
    return operator_spectrum(cca2)


@pytest.fixture(scope="session")
def four_mode_table():
    """4x4 product table with distinct correlations {1, 0.95, 0.8, 0.76}."""
    return make_product([make_two_state(0.95), make_two_state(0.8)])


@pytest.fixture(scope="session")
def four_mode_cca(four_mode_table):
    return exact_cca(four_mode_table)


@pytest.fixture(scope="session")
def four_mode_spec(four_mode_cca):
    return operator_spectrum(four_mode_cca)


@pytest.fixture(scope="session")
def perturbed_product_table():
    """4x4 product of two rho=0.6 factors with its exact tie broken."""
    return perturb_distinct(
        make_product([make_two_state(0.6), make_two_state(0.6)]), 1e-3, 0
    )


def pair_diff_norm(A: np.ndarray, B: np.ndarray) -> float:
    return float(np.abs(np.asarray(A) - np.asarray(B)).max())
