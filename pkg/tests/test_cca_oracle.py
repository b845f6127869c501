"""Exact canonical decomposition, operator eigenbasis, coordinate isometry."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import ROOT_06
from peira import (
    EncoderPair,
    coordinate_principal_angles,
    coordinates_of,
    exact_cca,
    from_coordinates,
    make_two_state,
    operator_spectrum,
    principal_angles,
    random_encoder_pair,
)
from peira.cca_oracle import CoordinatePoint, cca_from_json, cca_to_json
from peira.matstack import ShapeError


def weighted_gram(rows: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return (rows * weights) @ rows.T


class TestExactCca:
    def test_two_state_correlations_and_sign_functions(self, cca2):
        np.testing.assert_allclose(cca2.c, [1.0, 0.6], atol=1e-12)
        # constant pair first, then the ±1-valued sign pair with the leading
        # component fixed positive by the sign convention
        np.testing.assert_allclose(cca2.psi[0], [1.0, 1.0], atol=1e-10)
        np.testing.assert_allclose(cca2.psi[1], [1.0, -1.0], atol=1e-10)
        np.testing.assert_allclose(cca2.xi[1], [1.0, -1.0], atol=1e-10)

    def test_independence_single_pair(self):
        cca = exact_cca(make_two_state(0.0))
        assert cca.R == 1
        np.testing.assert_allclose(cca.c, [1.0], atol=1e-12)

    def test_perturbed_product_near_reference_values(self, perturbed_product_table):
        c = exact_cca(perturbed_product_table).c
        np.testing.assert_allclose(c, [1.0, 0.6, 0.6, 0.36], atol=5e-3)
        assert np.abs(np.diff(c)).min() > 1e-6  # ties actually broken

    def test_orthonormality_and_cross_correlation(self, four_mode_cca):
        cca = four_mode_cca
        eye = np.eye(cca.R)
        np.testing.assert_allclose(weighted_gram(cca.psi, cca.px), eye, atol=1e-10)
        np.testing.assert_allclose(weighted_gram(cca.xi, cca.py), eye, atol=1e-10)

    def test_cross_correlation_is_diagonal(self, four_mode_table, four_mode_cca):
        cca = four_mode_cca
        cross = cca.psi @ four_mode_table.p @ cca.xi.T
        np.testing.assert_allclose(cross, np.diag(cca.c), atol=1e-10)


class TestOperatorSpectrum:
    def test_two_state_paired_eigenvalues(self, spec2):
        np.testing.assert_allclose(spec2.s, [1.0, 0.6, -0.6, -1.0], atol=1e-12)
        assert spec2.d == 4

    def test_independence_zero_block(self):
        spec = operator_spectrum(exact_cca(make_two_state(0.0)))
        np.testing.assert_allclose(spec.s, [1.0, 0.0, 0.0, -1.0], atol=1e-12)

    def test_eigenvector_equation(self, two_state, cca2, spec2):
        # apply the cross-expectation operator to each eigenvector pair (a, b):
        # (E[b(y)|x], E[a(x)|y]) must equal s_i * (a, b)
        cond_y = two_state.p / two_state.px[:, None]   # p(y|x)
        cond_x = two_state.p / two_state.py[None, :]   # p(x|y)
        for i in range(spec2.d):
            a, b = spec2.za[i], spec2.zb[i]
            out_a = cond_y @ b
            out_b = cond_x.T @ a
            np.testing.assert_allclose(out_a, spec2.s[i] * a, atol=1e-10)
            np.testing.assert_allclose(out_b, spec2.s[i] * b, atol=1e-10)

    def test_eigenvector_pairing_with_canonical_functions(self, cca2, spec2):
        root2 = np.sqrt(2.0)
        np.testing.assert_allclose(spec2.za[1], cca2.psi[1] / root2, atol=1e-10)
        np.testing.assert_allclose(spec2.zb[1], cca2.xi[1] / root2, atol=1e-10)
        np.testing.assert_allclose(spec2.za[2], cca2.psi[1] / root2, atol=1e-10)
        np.testing.assert_allclose(spec2.zb[2], -cca2.xi[1] / root2, atol=1e-10)

    def test_basis_orthonormal_in_weighted_product(self, four_mode_spec):
        spec = four_mode_spec
        gram = (spec.za * spec.px) @ spec.za.T + (spec.zb * spec.py) @ spec.zb.T
        np.testing.assert_allclose(gram, np.eye(spec.d), atol=1e-9)


class TestCoordinates:
    def test_basis_element_maps_to_unit_entry(self, two_state, cca2, spec2):
        root2 = np.sqrt(2.0)
        U = np.vstack([cca2.psi[1] / root2, np.zeros(2)])
        V = np.vstack([cca2.xi[1] / root2, np.zeros(2)])
        point = coordinates_of(EncoderPair.from_tables(U, V, two_state), spec2)
        expected = np.zeros((2, 4))
        expected[0, 1] = 1.0  # the +0.6 eigenvalue slot
        np.testing.assert_allclose(point.w, expected, atol=1e-10)

    def test_zero_maps_to_zero(self, two_state, spec2):
        point = coordinates_of(EncoderPair.zeros(2, two_state), spec2)
        np.testing.assert_allclose(point.w, 0.0, atol=0.0)

    def test_isometry(self, four_mode_table, four_mode_spec):
        W = random_encoder_pair(four_mode_table, 3, scale=0.7, seed=11)
        point = coordinates_of(W, four_mode_spec)
        assert abs(np.linalg.norm(point.w) - W.norm()) <= 1e-10

    def test_quadratic_form_identity(self, four_mode_table, four_mode_spec):
        # W A W^T computed as exact sums equals w diag(S) w^T in coordinates
        table = four_mode_table
        W = random_encoder_pair(table, 2, scale=0.5, seed=12)
        point = coordinates_of(W, four_mode_spec)
        cond_y = table.p / table.px[:, None]
        cond_x = table.p / table.py[None, :]
        au = W.V @ cond_y.T          # E[V(y)|x] rows
        av = W.U @ cond_x
        direct = (W.U * table.px) @ au.T + (W.V * table.py) @ av.T
        via_coords = (point.w * point.S) @ point.w.T
        np.testing.assert_allclose(direct, via_coords, atol=1e-10)

    def test_round_trip(self, four_mode_table, four_mode_spec):
        W = random_encoder_pair(four_mode_table, 2, scale=0.4, seed=13)
        back = from_coordinates(coordinates_of(W, four_mode_spec), four_mode_spec)
        np.testing.assert_allclose(back.U, W.U, atol=1e-10)
        np.testing.assert_allclose(back.V, W.V, atol=1e-10)

    def test_linearity(self, two_state, spec2):
        W1 = random_encoder_pair(two_state, 2, scale=1.0, seed=1)
        W2 = random_encoder_pair(two_state, 2, scale=1.0, seed=2)
        w1 = coordinates_of(W1, spec2).w
        w2 = coordinates_of(W2, spec2).w
        combo = from_coordinates(
            CoordinatePoint(w=2.0 * w1 - 3.0 * w2, S=spec2.s), spec2
        )
        np.testing.assert_allclose(combo.U, 2.0 * W1.U - 3.0 * W2.U, atol=1e-10)
        np.testing.assert_allclose(combo.V, 2.0 * W1.V - 3.0 * W2.V, atol=1e-10)

    def test_dimension_mismatch_rejected(self, two_state, four_mode_spec):
        W = random_encoder_pair(two_state, 2, scale=0.5, seed=3)
        with pytest.raises(ShapeError):
            coordinates_of(W, four_mode_spec)


class TestPrincipalAngles:
    def test_exact_top_span_gives_zeros(self, four_mode_table, four_mode_cca):
        cca = four_mode_cca
        W = EncoderPair.from_tables(cca.psi[:2], cca.xi[:2], four_mode_table)
        au, av = principal_angles(W, cca, 2)
        np.testing.assert_allclose(au, 0.0, atol=1e-8)
        np.testing.assert_allclose(av, 0.0, atol=1e-8)

    def test_rotation_invariance(self, four_mode_table, four_mode_cca):
        gen = np.random.Generator(np.random.Philox(key=np.uint64(9)))
        q, r = np.linalg.qr(gen.standard_normal((2, 2)))
        q = q * np.sign(np.diag(r))
        cca = four_mode_cca
        W = EncoderPair.from_tables(q @ cca.psi[:2], q @ cca.xi[:2], four_mode_table)
        au, av = principal_angles(W, cca, 2)
        assert max(au.max(), av.max()) < 1e-8

    def test_orthogonal_complement_gives_right_angles(self, four_mode_table,
                                                      four_mode_cca):
        cca = four_mode_cca
        W = EncoderPair.from_tables(cca.psi[2:4], cca.xi[2:4], four_mode_table)
        au, av = principal_angles(W, cca, 2)
        np.testing.assert_allclose(au, np.pi / 2.0, atol=1e-8)
        np.testing.assert_allclose(av, np.pi / 2.0, atol=1e-8)

    def test_rank_deficient_rows_fill_with_right_angles(self, four_mode_table,
                                                        four_mode_cca):
        cca = four_mode_cca
        U = np.vstack([cca.psi[0], np.zeros(4)])
        V = np.vstack([cca.xi[0], np.zeros(4)])
        au, av = principal_angles(
            EncoderPair.from_tables(U, V, four_mode_table), cca, 2
        )
        np.testing.assert_allclose(au, [0.0, np.pi / 2.0], atol=1e-8)
        np.testing.assert_allclose(av, [0.0, np.pi / 2.0], atol=1e-8)

    def test_r_out_of_range_rejected(self, two_state, cca2):
        W = random_encoder_pair(two_state, 2, scale=0.5, seed=4)
        with pytest.raises(ValueError):
            principal_angles(W, cca2, 3)

    def test_small_tilt_measured_accurately(self):
        # sine-based angles retain precision far below the acos floor ~1.5e-8
        tilt = 1e-9
        w = np.zeros((1, 4))
        w[0, 0] = 1.0
        w[0, 2] = np.tan(tilt)
        angles = coordinate_principal_angles(CoordinatePoint(w=w, S=np.zeros(4)), 1)
        np.testing.assert_allclose(angles[0], tilt, rtol=1e-6)

    def test_coordinate_angles_match_axis_spans(self, spec2):
        w = np.zeros((2, 4))
        w[0, 0] = 0.7
        w[1, 1] = 0.3
        point = CoordinatePoint(w=w, S=spec2.s)
        np.testing.assert_allclose(
            coordinate_principal_angles(point, 2), 0.0, atol=1e-10
        )
        w2 = np.zeros((2, 4))
        w2[0, 2] = 1.0
        w2[1, 3] = 1.0
        point2 = CoordinatePoint(w=w2, S=spec2.s)
        np.testing.assert_allclose(
            coordinate_principal_angles(point2, 2), np.pi / 2.0, atol=1e-10
        )


class TestJson:
    def test_round_trip_preserves_decomposition(self, two_state, cca2):
        rebuilt = cca_from_json(cca_to_json(cca2), two_state)
        np.testing.assert_array_equal(rebuilt.c, cca2.c)
        np.testing.assert_array_equal(rebuilt.psi, cca2.psi)
        np.testing.assert_array_equal(rebuilt.xi, cca2.xi)

    def test_rejects_unknown_keys(self, two_state, cca2):
        doc = cca_to_json(cca2)
        doc["extra"] = 1
        with pytest.raises(ValueError):
            cca_from_json(doc, two_state)

    def test_rejects_inconsistent_tables(self, two_state):
        # functions that are not orthonormal under the table marginals
        doc = {"c": [1.0, 0.6], "psi": [[1.0, 1.0], [2.0, -2.0]],
               "xi": [[1.0, 1.0], [1.0, -1.0]]}
        with pytest.raises(ArithmeticError):
            cca_from_json(doc, two_state)


def test_root_06_constant_is_consistent():
    assert abs(ROOT_06 - np.sqrt(0.6)) < 1e-16
