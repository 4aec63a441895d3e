"""Basis evaluation, derivative recursion, sparse assembly, and fitting.

Independent oracles: scipy.interpolate.BSpline (not used by the package
itself) and central finite differences.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import BSpline

from splinesid.errors import ConfigError, DomainError, SingularBasisError
from splinesid.splines import (
    build_basis_matrix,
    eval_basis,
    eval_basis_deriv,
    fit_least_squares,
    fit_ridge,
    uniform_clamped_knots,
)


def scipy_basis(kv, s):
    coeff = np.zeros(kv.num_basis)
    coeff[s] = 1.0
    return BSpline(kv.knots, coeff, kv.degree, extrapolate=False)


class TestKnotVector:
    def test_clamped_structure(self):
        kv = uniform_clamped_knots(0.0, 1.0, 7, 3)
        assert kv.num_basis == 7
        assert kv.domain == (0.0, 1.0)
        assert np.all(kv.knots[:4] == 0.0)
        assert np.all(kv.knots[-4:] == 1.0)
        interior = kv.knots[3:-3]
        assert np.allclose(np.diff(interior), np.diff(interior)[0])

    def test_rejects_empty_domain(self):
        with pytest.raises(ConfigError):
            uniform_clamped_knots(1.0, 1.0, 7, 3)

    def test_rejects_too_few_basis(self):
        with pytest.raises(ConfigError):
            uniform_clamped_knots(0.0, 1.0, 3, 3)


class TestScalarEvaluation:
    @pytest.mark.parametrize("degree", [1, 2, 3, 4, 5])
    def test_matches_scipy(self, degree):
        kv = uniform_clamped_knots(-1.3, 2.7, 9 + degree, degree)
        rng = np.random.default_rng(degree)
        ts = np.append(rng.uniform(-1.3, 2.7, 100), [-1.3, 2.7])
        for s in range(kv.num_basis):
            ref = np.nan_to_num(scipy_basis(kv, s)(ts))
            mine = np.array([eval_basis(kv, s, t) for t in ts])
            np.testing.assert_allclose(mine, ref, atol=1e-12)

    def test_right_endpoint_closure(self):
        kv = uniform_clamped_knots(0.0, 1.0, 8, 3)
        total = sum(eval_basis(kv, s, 1.0) for s in range(kv.num_basis))
        assert total == pytest.approx(1.0, abs=1e-14)
        assert eval_basis(kv, kv.num_basis - 1, 1.0) == pytest.approx(1.0)

    def test_outside_domain_raises(self):
        kv = uniform_clamped_knots(0.0, 1.0, 8, 3)
        with pytest.raises(DomainError):
            eval_basis(kv, 0, -0.01)
        with pytest.raises(DomainError):
            eval_basis(kv, 0, 1.01)

    def test_bad_index_raises(self):
        kv = uniform_clamped_knots(0.0, 1.0, 8, 3)
        with pytest.raises(ConfigError):
            eval_basis(kv, 8, 0.5)


class TestDerivatives:
    @pytest.mark.parametrize("degree", [2, 3, 4, 5])
    def test_matches_scipy_first_and_second(self, degree):
        kv = uniform_clamped_knots(0.0, 4.0, 8 + degree, degree)
        rng = np.random.default_rng(degree)
        ts = rng.uniform(0.0, 4.0, 60)
        for s in range(0, kv.num_basis, 2):
            ref = scipy_basis(kv, s)
            for q in (1, 2):
                theirs = np.nan_to_num(ref.derivative(q)(ts))
                mine = np.array([eval_basis_deriv(kv, s, t, q) for t in ts])
                np.testing.assert_allclose(mine, theirs, rtol=1e-10, atol=1e-10)

    def test_matches_central_differences(self):
        kv = uniform_clamped_knots(0.0, 1.0, 12, 3)
        rng = np.random.default_rng(7)
        h = 1e-5
        ts = rng.uniform(0.05, 0.95, 50)
        for s in (0, 3, 6, 11):
            for t in ts:
                fd = (eval_basis(kv, s, t + h) - eval_basis(kv, s, t - h)) / (2 * h)
                an = eval_basis_deriv(kv, s, t, 1)
                assert abs(an - fd) <= 1e-5 * max(1.0, abs(fd))

    def test_order_above_degree_is_zero(self):
        kv = uniform_clamped_knots(0.0, 1.0, 9, 3)
        assert eval_basis_deriv(kv, 4, 0.37, 4) == 0.0
        bm = build_basis_matrix(kv, np.linspace(0, 1, 11), 4)
        assert bm.matrix.nnz == 0

    def test_order_zero_is_value(self):
        kv = uniform_clamped_knots(0.0, 1.0, 9, 3)
        assert eval_basis_deriv(kv, 4, 0.37, 0) == eval_basis(kv, 4, 0.37)


class TestBasisMatrix:
    def test_matches_scalar_recursion(self):
        kv = uniform_clamped_knots(0.0, 10.0, 14, 3)
        rng = np.random.default_rng(1)
        ts = np.append(rng.uniform(0, 10, 80), [0.0, 10.0])
        for q in (0, 1, 2, 3):
            dense = build_basis_matrix(kv, ts, q).matrix.toarray()
            ref = np.array(
                [[eval_basis_deriv(kv, s, t, q) for s in range(kv.num_basis)] for t in ts]
            )
            np.testing.assert_allclose(dense, ref, atol=1e-12)

    def test_partition_of_unity_random_interior(self):
        kv = uniform_clamped_knots(-3.0, 5.0, 40, 3)
        ts = np.random.default_rng(2).uniform(-3.0, 5.0, 1000)
        sums = np.asarray(build_basis_matrix(kv, ts, 0).matrix.sum(axis=1)).ravel()
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_local_support_bound(self):
        kv = uniform_clamped_knots(0.0, 1.0, 25, 3)
        ts = np.random.default_rng(3).uniform(0, 1, 200)
        bm = build_basis_matrix(kv, ts, 0)
        per_row = np.diff(bm.matrix.indptr)
        assert per_row.max() <= kv.degree + 1

    def test_domain_error_names_offender(self):
        kv = uniform_clamped_knots(0.0, 1.0, 9, 3)
        with pytest.raises(DomainError, match="1.5"):
            build_basis_matrix(kv, np.array([0.2, 1.5, 0.4]), 0)

    @settings(max_examples=40, deadline=None)
    @given(
        degree=st.integers(min_value=1, max_value=5),
        extra=st.integers(min_value=1, max_value=25),
        width=st.floats(min_value=0.1, max_value=50.0),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    def test_partition_of_unity_property(self, degree, extra, width, seed):
        kv = uniform_clamped_knots(0.0, width, degree + extra, degree)
        ts = np.random.default_rng(seed).uniform(0.0, width, 64)
        sums = np.asarray(build_basis_matrix(kv, ts, 0).matrix.sum(axis=1)).ravel()
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(
        degree=st.integers(min_value=2, max_value=5),
        extra=st.integers(min_value=2, max_value=20),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    def test_derivative_rows_sum_to_zero(self, degree, extra, seed):
        # derivative of the partition of unity vanishes
        kv = uniform_clamped_knots(0.0, 1.0, degree + extra, degree)
        ts = np.random.default_rng(seed).uniform(0.0, 1.0, 64)
        bm = build_basis_matrix(kv, ts, 1)
        scale = max(1.0, np.abs(bm.matrix.data).max() if bm.matrix.nnz else 1.0)
        sums = np.asarray(bm.matrix.sum(axis=1)).ravel()
        np.testing.assert_allclose(sums / scale, 0.0, atol=1e-12)


class TestTensorProduct:
    def test_row_is_outer_product_of_axis_rows(self):
        kvx = uniform_clamped_knots(0.0, 10.0, 14, 3)
        kvy = uniform_clamped_knots(-2.0, 3.0, 8, 2)
        rng = np.random.default_rng(4)
        pts = np.column_stack([rng.uniform(0, 10, 50), rng.uniform(-2, 3, 50)])
        for deriv in ((0, 0), (1, 0), (0, 2), (1, 2)):
            full = build_basis_matrix((kvx, kvy), pts, deriv).matrix.toarray()
            ax = build_basis_matrix(kvx, pts[:, 0], deriv[0]).matrix.toarray()
            ay = build_basis_matrix(kvy, pts[:, 1], deriv[1]).matrix.toarray()
            ref = np.einsum("ni,nj->nij", ax, ay).reshape(50, -1)
            np.testing.assert_allclose(full, ref, atol=1e-14)

    def test_flat_column_convention(self):
        # function (s1, s2) lives in flat column s1 * nb2 + s2
        kvx = uniform_clamped_knots(0.0, 1.0, 6, 2)
        kvy = uniform_clamped_knots(0.0, 1.0, 5, 2)
        pt = np.array([[0.33, 0.71]])
        full = build_basis_matrix((kvx, kvy), pt, (0, 0)).matrix.toarray()[0]
        for s1 in range(kvx.num_basis):
            for s2 in range(kvy.num_basis):
                expect = eval_basis(kvx, s1, 0.33) * eval_basis(kvy, s2, 0.71)
                assert full[s1 * kvy.num_basis + s2] == pytest.approx(expect, abs=1e-14)

    def test_partition_of_unity_2d(self):
        kvx = uniform_clamped_knots(0.0, 1.0, 9, 3)
        kvy = uniform_clamped_knots(0.0, 2.0, 7, 3)
        rng = np.random.default_rng(5)
        pts = np.column_stack([rng.uniform(0, 1, 300), rng.uniform(0, 2, 300)])
        sums = np.asarray(build_basis_matrix((kvx, kvy), pts, (0, 0)).matrix.sum(axis=1)).ravel()
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)


class TestFitting:
    def test_exact_recovery_of_spline_data(self):
        kv = uniform_clamped_knots(0.0, 10.0, 14, 3)
        rng = np.random.default_rng(6)
        theta = rng.normal(size=(kv.num_basis, 2))
        bm = build_basis_matrix(kv, np.linspace(0, 10, 200), 0)
        fit = fit_least_squares(bm, bm.matrix @ theta)
        np.testing.assert_allclose(fit, theta, atol=1e-10)

    def test_single_column_roundtrip(self):
        kv = uniform_clamped_knots(0.0, 1.0, 10, 3)
        bm = build_basis_matrix(kv, np.linspace(0, 1, 50), 0)
        theta = np.arange(10.0)
        fit = fit_least_squares(bm, bm.matrix @ theta)
        assert fit.shape == (10,)
        np.testing.assert_allclose(fit, theta, atol=1e-10)

    def test_underdetermined_raises(self):
        kv = uniform_clamped_knots(0.0, 1.0, 20, 3)
        bm = build_basis_matrix(kv, np.linspace(0, 1, 10), 0)
        with pytest.raises(SingularBasisError, match="control points"):
            fit_least_squares(bm, np.zeros(10))

    def test_rank_deficient_raises(self):
        # enough rows but all measurements at one point
        kv = uniform_clamped_knots(0.0, 1.0, 8, 3)
        bm = build_basis_matrix(kv, np.full(30, 0.5), 0)
        with pytest.raises(SingularBasisError):
            fit_least_squares(bm, np.zeros(30))

    def test_ridge_handles_underdetermined(self):
        kv = uniform_clamped_knots(0.0, 1.0, 20, 3)
        pts = np.linspace(0, 1, 10)
        bm = build_basis_matrix(kv, pts, 0)
        theta = fit_ridge(bm, np.sin(pts))
        assert theta.shape == (20,)
        np.testing.assert_allclose(bm.matrix @ theta, np.sin(pts), atol=1e-3)
