"""Term descriptors, library evaluation, analytic Jacobians, rendering."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splinesid.errors import ConfigError
from splinesid.library import (
    TermDescriptor,
    build_pde_library,
    build_polynomial_library,
    evaluate_library,
    library_jacobian_theta,
    reconstruct_fields,
    render_equation,
)
from splinesid.splines import build_basis_matrix, uniform_clamped_knots


def ode_context(num_states=2, nb=7, npts=40, seed=0):
    kv = uniform_clamped_knots(0.0, 1.0, nb, 3)
    pts = np.linspace(0.0, 1.0, npts)
    basis = {
        (0,): build_basis_matrix(kv, pts, 0),
        (1,): build_basis_matrix(kv, pts, 1),
    }
    theta = np.random.default_rng(seed).normal(size=(nb, num_states))
    return kv, pts, basis, theta


class TestDescriptors:
    def test_merges_and_sorts_factors(self):
        a = TermDescriptor(((1, (0,), 1), (0, (0,), 2), (1, (0,), 1)))
        b = TermDescriptor(((0, (0,), 2), (1, (0,), 2)))
        assert a == b
        assert a.total_degree == 4

    def test_rejects_zero_exponent(self):
        with pytest.raises(ConfigError):
            TermDescriptor(((0, (0,), 0),))

    def test_rejects_unknown_forcing(self):
        with pytest.raises(ConfigError, match="unknown forcing"):
            TermDescriptor((), "cos(x)cos(t)")

    @settings(max_examples=50, deadline=None)
    @given(st.permutations([(0, (0, 0), 1), (0, (1, 0), 2), (0, (2, 0), 1)]))
    def test_factor_order_irrelevant(self, perm):
        assert TermDescriptor(tuple(perm)) == TermDescriptor(
            ((0, (0, 0), 1), (0, (1, 0), 2), (0, (2, 0), 1))
        )

    def test_labels(self):
        names, axes = ("x", "y"), ("t",)
        assert TermDescriptor().label(names, axes) == "1"
        assert TermDescriptor(((0, (0,), 2), (1, (0,), 1))).label(names, axes) == "x^2y"
        pde = TermDescriptor(((0, (0, 0), 1), (0, (2, 0), 1)))
        assert pde.label(("u",), ("x", "t")) == "uu_xx"


class TestBuilders:
    def test_polynomial_counts(self):
        assert len(build_polynomial_library(2, 3)) == 10
        assert len(build_polynomial_library(6, 3)) == 84
        assert len(build_polynomial_library(2, 3, include_constant=False)) == 9

    def test_polynomial_order(self):
        lib = build_polynomial_library(2, 3)
        labels = [t.label(("x", "y"), ("t",)) for t in lib]
        assert labels == ["1", "x", "y", "x^2", "xy", "y^2", "x^3", "x^2y", "xy^2", "y^3"]

    def test_pde_count_and_members(self):
        lib = build_pde_library(3, 3)
        # constant + u,u^2,u^3 + 6 mixed per derivative order
        assert len(lib) == 22
        labels = {t.label(("u",), ("x", "t")) for t in lib}
        assert {"1", "u", "uu_x", "u^2u_xxx", "u_xx^3", "u^3"} <= labels

    def test_pde_forcings_appended(self):
        lib = build_pde_library(2, 2, forcings=("sin(x)sin(t)",))
        assert lib[-1].forcing == "sin(x)sin(t)"
        with pytest.raises(ConfigError):
            build_pde_library(2, 2, forcings=("tan(x)",))

    def test_deriv_order_above_spline_degree(self):
        with pytest.raises(ConfigError, match="spline degree"):
            build_pde_library(3, 4, spline_degree=3)

    def test_deterministic_order(self):
        assert build_pde_library(3, 3) == build_pde_library(3, 3)


class TestEvaluation:
    def test_monomial_column_is_product_of_state_columns(self):
        _, pts, basis, theta = ode_context(num_states=6, seed=1)
        lib = build_polynomial_library(6, 3)
        mat = evaluate_library(lib, theta, basis).values
        fields = reconstruct_fields(lib, theta, basis)
        x2 = fields[(1, (0,))]
        x6 = fields[(5, (0,))]
        idx = [t.label(tuple(f"X{i+1}" for i in range(6)), ("t",)) for t in lib].index("X2X6")
        np.testing.assert_allclose(mat[:, idx], x2 * x6, rtol=1e-13)

    def test_constant_column_is_ones(self):
        _, _, basis, theta = ode_context()
        lib = build_polynomial_library(2, 2)
        mat = evaluate_library(lib, theta, basis).values
        np.testing.assert_array_equal(mat[:, 0], 1.0)

    def test_forcing_column(self):
        kvx = uniform_clamped_knots(0.0, 2 * np.pi, 8, 3)
        kvt = uniform_clamped_knots(0.0, 3.0, 8, 3)
        rng = np.random.default_rng(2)
        coords = np.column_stack(
            [rng.uniform(0, 2 * np.pi, 30), rng.uniform(0, 3, 30)]
        )
        basis = {
            (0, 0): build_basis_matrix((kvx, kvt), coords, (0, 0)),
            (1, 0): build_basis_matrix((kvx, kvt), coords, (1, 0)),
        }
        theta = rng.normal(size=(64, 1))
        lib = build_pde_library(1, 1, forcings=("sin(x)sin(t)",))
        mat = evaluate_library(lib, theta, basis, coords=coords).values
        np.testing.assert_allclose(
            mat[:, -1], np.sin(coords[:, 0]) * np.sin(coords[:, 1]), rtol=1e-13
        )

    def test_forcing_without_coords_raises(self):
        _, _, basis, theta = ode_context(num_states=1)
        lib = (TermDescriptor((), "sin(x)"),)
        with pytest.raises(ConfigError, match="coordinates"):
            evaluate_library(lib, theta, basis)

    def test_missing_derivative_matrix_raises(self):
        _, _, basis, theta = ode_context(num_states=1)
        lib = (TermDescriptor(((0, (2,), 1),)),)
        with pytest.raises(ConfigError, match="no basis matrix"):
            evaluate_library(lib, theta, basis)

    def test_nonfinite_field_raises(self):
        _, _, basis, theta = ode_context(num_states=1)
        theta = theta.copy()
        theta[0, 0] = np.nan
        lib = build_polynomial_library(1, 2)
        with pytest.raises(ConfigError, match="non-finite"):
            evaluate_library(lib, theta, basis)


class TestJacobian:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_central_differences(self, seed):
        nb, d = 6, 2
        kv = uniform_clamped_knots(0.0, 1.0, nb, 3)
        pts = np.linspace(0.0, 1.0, 15)
        basis = {(0,): build_basis_matrix(kv, pts, 0)}
        theta = np.random.default_rng(seed).normal(size=(nb, d))
        lib = build_polynomial_library(d, 3)
        jacs = library_jacobian_theta(lib, theta, basis)
        h = 1e-6
        flat = theta.T.ravel().copy()  # state-major flattening

        def columns(vec):
            th = vec.reshape(d, nb).T
            return evaluate_library(lib, th, basis).values

        for e in range(flat.size):
            up, dn = flat.copy(), flat.copy()
            up[e] += h
            dn[e] -= h
            fd = (columns(up) - columns(dn)) / (2 * h)
            for i, jac in enumerate(jacs):
                an = jac[:, e].toarray().ravel()
                np.testing.assert_allclose(an, fd[:, i], rtol=1e-5, atol=1e-6)

    def test_forcing_column_jacobian_is_zero(self):
        kvx = uniform_clamped_knots(0.0, 2 * np.pi, 6, 3)
        kvt = uniform_clamped_knots(0.0, 1.0, 6, 3)
        coords = np.column_stack([np.linspace(0, 2 * np.pi, 20), np.linspace(0, 1, 20)])
        basis = {(0, 0): build_basis_matrix((kvx, kvt), coords, (0, 0))}
        theta = np.ones((36, 1))
        lib = (TermDescriptor((), "sin(x)sin(t)"),)
        jac = library_jacobian_theta(lib, theta, basis, coords=coords)
        assert jac[0].nnz == 0

    def test_pde_jacobian_uses_derivative_fields(self):
        kvx = uniform_clamped_knots(0.0, 1.0, 7, 3)
        kvt = uniform_clamped_knots(0.0, 1.0, 6, 3)
        rng = np.random.default_rng(3)
        coords = np.column_stack([rng.uniform(0, 1, 25), rng.uniform(0, 1, 25)])
        basis = {
            (0, 0): build_basis_matrix((kvx, kvt), coords, (0, 0)),
            (1, 0): build_basis_matrix((kvx, kvt), coords, (1, 0)),
        }
        nb = 42
        theta = rng.normal(size=(nb, 1))
        lib = (TermDescriptor(((0, (0, 0), 1), (0, (1, 0), 1))),)  # u * u_x
        jac = library_jacobian_theta(lib, theta, basis, coords=coords)[0]
        h = 1e-6
        fd = np.empty((25, nb))
        for e in range(nb):
            up, dn = theta.copy(), theta.copy()
            up[e, 0] += h
            dn[e, 0] -= h
            fd[:, e] = (
                evaluate_library(lib, up, basis).values[:, 0]
                - evaluate_library(lib, dn, basis).values[:, 0]
            ) / (2 * h)
        np.testing.assert_allclose(jac.toarray(), fd, rtol=1e-5, atol=1e-7)


class TestRendering:
    def test_single_term_with_uncertainty(self):
        lib = (TermDescriptor(((0, (1, 0), 1),)),)
        text = render_equation(
            "u_t", lib, np.array([-0.9988]), np.array([0.024]),
            state_names=("u",), axes=("x", "t"),
        )
        assert text == "u_t = -0.9988(±0.024)u_x"

    def test_all_zero(self):
        lib = build_polynomial_library(2, 2)
        text = render_equation(
            "dx/dt", lib, np.zeros(len(lib)), state_names=("x", "y"), axes=("t",)
        )
        assert text == "dx/dt = 0"

    def test_multi_term_signs_and_skip_zeros(self):
        lib = build_polynomial_library(2, 3)
        coeffs = np.zeros(len(lib))
        labels = [t.label(("x", "y"), ("t",)) for t in lib]
        coeffs[labels.index("x")] = -0.9858
        coeffs[labels.index("y")] = 0.4889
        coeffs[labels.index("x^2y")] = -0.4801
        text = render_equation("dy/dt", lib, coeffs, state_names=("x", "y"), axes=("t",))
        assert text == "dy/dt = -0.9858x+0.4889y-0.4801x^2y"

    def test_constant_renders_bare(self):
        lib = build_polynomial_library(1, 1)
        text = render_equation("dx/dt", lib, np.array([8.0, -1.0]),
                               state_names=("x",), axes=("t",))
        assert text == "dx/dt = 8.0000-1.0000x"

    def test_length_mismatch_raises(self):
        lib = build_polynomial_library(1, 1)
        with pytest.raises(ConfigError):
            render_equation("dx/dt", lib, np.array([1.0]), state_names=("x",), axes=("t",))
