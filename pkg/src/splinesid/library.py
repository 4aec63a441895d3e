"""Candidate-term libraries over reconstructed states.

A candidate term is a product of powers of reconstructed fields (a state or
one of its spatial derivatives) optionally times a known coordinate forcing
function.  Libraries are ordered tuples of :class:`TermDescriptor`; their
evaluation at collocation points yields the regression matrix whose sparse
coefficient vector is the governing equation.

Because every field is linear in the spline control points, each library
column has an analytic Jacobian with respect to the control points; the
trainer differentiates the physics residual exactly through these partials.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .splines import BasisMatrix

__all__ = [
    "TermDescriptor",
    "LibraryMatrix",
    "FORCINGS",
    "build_polynomial_library",
    "build_pde_library",
    "reconstruct_fields",
    "evaluate_library",
    "library_jacobian_theta",
    "polynomial_rhs",
    "render_equation",
]

# Coordinate forcing functions, keyed by the label they render as.  Each maps
# an (n, naxes) coordinate array to a column.  Axis 0 is x; axis 1 is t for
# evolution problems and y for steady ones.
FORCINGS = {
    "const": lambda c: np.ones(c.shape[0]),
    "sin(x)": lambda c: np.sin(c[:, 0]),
    "sin(x)sin(t)": lambda c: np.sin(c[:, 0]) * np.sin(c[:, 1]),
    "sin(x)cos(t)": lambda c: np.sin(c[:, 0]) * np.cos(c[:, 1]),
    "sin(x)sin(y)": lambda c: np.sin(c[:, 0]) * np.sin(c[:, 1]),
    "sin(x)cos(y)": lambda c: np.sin(c[:, 0]) * np.cos(c[:, 1]),
}


@dataclass(frozen=True)
class TermDescriptor:
    """One candidate term.

    Attributes
    ----------
    factors : tuple of (state, deriv, exponent)
        ``state`` indexes the state variable, ``deriv`` is a per-axis
        derivative-order tuple, ``exponent`` is a positive integer.  The
        tuple is kept canonically sorted with duplicates merged.
    forcing : str or None
        Label of a known coordinate function from :data:`FORCINGS`.
    """

    factors: tuple[tuple[int, tuple[int, ...], int], ...] = ()
    forcing: str | None = None

    def __post_init__(self):
        merged: dict[tuple[int, tuple[int, ...]], int] = {}
        for state, deriv, exp in self.factors:
            if exp < 1:
                raise ConfigError(f"factor exponent must be >= 1, got {exp}")
            key = (int(state), tuple(int(q) for q in deriv))
            merged[key] = merged.get(key, 0) + int(exp)
        canon = tuple(
            (state, deriv, merged[(state, deriv)])
            for state, deriv in sorted(merged)
        )
        object.__setattr__(self, "factors", canon)
        if self.forcing is not None and self.forcing not in FORCINGS:
            raise ConfigError(
                f"unknown forcing {self.forcing!r}; known: {sorted(FORCINGS)}"
            )

    @property
    def total_degree(self) -> int:
        return sum(exp for _, _, exp in self.factors)

    @property
    def max_deriv_order(self) -> int:
        orders = [max(deriv) for _, deriv, _ in self.factors]
        return max(orders, default=0)

    @property
    def sort_key(self):
        # canonical order: constant, monomials by total degree then
        # lexicographically by their expanded (state, deriv) multiset,
        # forcing terms last by name
        expanded = tuple(
            (state, deriv)
            for state, deriv, exp in self.factors
            for _ in range(exp)
        )
        return (self.forcing is not None, self.total_degree, expanded, self.forcing or "")

    def label(self, state_names: tuple[str, ...], axes: tuple[str, ...]) -> str:
        """Human-readable label, e.g. ``x^2y`` or ``uu_xx``."""
        parts = []
        for state, deriv, exp in self.factors:
            name = state_names[state]
            suffix = "".join(ax * q for ax, q in zip(axes, deriv))
            if suffix:
                name += "_" + suffix
            if exp > 1:
                name += f"^{exp}"
            parts.append(name)
        if self.forcing is not None and self.forcing != "const":
            parts.append(self.forcing)
        if not parts:
            return "1"
        return "".join(parts)


@dataclass(frozen=True)
class LibraryMatrix:
    """Library values at collocation points: one column per descriptor."""

    values: np.ndarray
    descriptors: tuple[TermDescriptor, ...] = field(repr=False)

    def __post_init__(self):
        if self.values.shape[1] != len(self.descriptors):
            raise ConfigError(
                f"{self.values.shape[1]} columns for {len(self.descriptors)} descriptors"
            )


def build_polynomial_library(
    num_states: int,
    max_degree: int,
    include_constant: bool = True,
    naxes: int = 1,
) -> tuple[TermDescriptor, ...]:
    """All monomials in the states up to ``max_degree``.

    Term count with the constant is binomial(num_states + max_degree,
    max_degree).  Ordered by total degree, then lexicographically by
    (state index, derivative order, exponent).
    """
    if num_states < 1 or max_degree < 1:
        raise ConfigError("need at least one state and degree >= 1")
    zero = (0,) * naxes
    terms = []
    if include_constant:
        terms.append(TermDescriptor())
    for degree in range(1, max_degree + 1):
        for combo in combinations_with_replacement(range(num_states), degree):
            terms.append(
                TermDescriptor(tuple((s, zero, 1) for s in combo))
            )
    terms.sort(key=lambda d: d.sort_key)
    return tuple(terms)


def build_pde_library(
    max_poly_degree: int,
    max_deriv_order: int,
    forcings: tuple[str, ...] = (),
    include_constant: bool = True,
    spline_degree: int | None = None,
) -> tuple[TermDescriptor, ...]:
    """Products ``u^a (d^q u/dx^q)^b`` with ``a + b <= max_poly_degree`` and
    ``1 <= q <= max_deriv_order``, pure powers of ``u``, plus forcings.

    Derivatives act on the first axis only; the evolution (or second
    spatial) axis is reserved for the left-hand side.
    """
    if max_poly_degree < 1 or max_deriv_order < 1:
        raise ConfigError("polynomial degree and derivative order must be >= 1")
    if spline_degree is not None and max_deriv_order > spline_degree:
        raise ConfigError(
            f"max derivative order {max_deriv_order} exceeds spline degree {spline_degree}"
        )
    terms = []
    if include_constant:
        terms.append(TermDescriptor())
    for a in range(1, max_poly_degree + 1):
        terms.append(TermDescriptor(((0, (0, 0), a),)))
    for q in range(1, max_deriv_order + 1):
        for b in range(1, max_poly_degree + 1):
            for a in range(0, max_poly_degree - b + 1):
                factors = []
                if a:
                    factors.append((0, (0, 0), a))
                factors.append((0, (q, 0), b))
                terms.append(TermDescriptor(tuple(factors)))
    for name in forcings:
        if name not in FORCINGS:
            raise ConfigError(
                f"unknown forcing {name!r}; known: {sorted(FORCINGS)}"
            )
        terms.append(TermDescriptor((), name))
    terms.sort(key=lambda d: d.sort_key)
    # drop duplicates while preserving canonical order
    seen, unique = set(), []
    for term in terms:
        if term.sort_key not in seen:
            seen.add(term.sort_key)
            unique.append(term)
    return tuple(unique)


def required_fields(
    descriptors: tuple[TermDescriptor, ...]
) -> tuple[tuple[int, tuple[int, ...]], ...]:
    """Distinct (state, derivative) pairs the library evaluates."""
    fields = {
        (state, deriv)
        for term in descriptors
        for state, deriv, _ in term.factors
    }
    return tuple(sorted(fields))


def reconstruct_fields(
    descriptors: tuple[TermDescriptor, ...],
    theta: np.ndarray,
    basis_by_deriv: dict[tuple[int, ...], BasisMatrix],
) -> dict[tuple[int, tuple[int, ...]], np.ndarray]:
    """Evaluate each required field ``basis(deriv) @ theta[:, state]``."""
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        theta = theta[:, None]
    fields = {}
    for state, deriv in required_fields(descriptors):
        if deriv not in basis_by_deriv:
            raise ConfigError(
                f"no basis matrix for derivative {deriv}; have {sorted(basis_by_deriv)}"
            )
        fields[(state, deriv)] = basis_by_deriv[deriv].matrix @ theta[:, state]
    return fields


def evaluate_library(
    descriptors: tuple[TermDescriptor, ...],
    theta: np.ndarray,
    basis_by_deriv: dict[tuple[int, ...], BasisMatrix],
    coords: np.ndarray | None = None,
    fields: dict | None = None,
) -> LibraryMatrix:
    """Evaluate every candidate term at the collocation points.

    ``coords`` is required when the library contains non-constant forcing
    terms.  Precomputed ``fields`` may be passed to avoid repeated
    reconstruction inside training loops.
    """
    if fields is None:
        fields = reconstruct_fields(descriptors, theta, basis_by_deriv)
    npts = next((f.shape[0] for f in fields.values()), None)
    if npts is None:
        if coords is None:
            raise ConfigError("library of pure forcings needs coordinates")
        pts = np.asarray(coords)
        npts = pts.shape[0]
    for value in fields.values():
        if not np.all(np.isfinite(value)):
            raise ConfigError("non-finite reconstructed field; check control points")
    cols = np.empty((npts, len(descriptors)))
    for i, term in enumerate(descriptors):
        col = np.ones(npts)
        for state, deriv, exp in term.factors:
            col = col * fields[(state, deriv)] ** exp
        if term.forcing is not None:
            if coords is None:
                raise ConfigError(
                    f"forcing term {term.forcing!r} needs collocation coordinates"
                )
            pts = np.asarray(coords, dtype=float)
            if pts.ndim == 1:
                pts = pts[:, None]
            col = col * FORCINGS[term.forcing](pts)
        cols[:, i] = col
    return LibraryMatrix(cols, tuple(descriptors))


def term_partials(
    descriptors: tuple[TermDescriptor, ...],
    fields: dict[tuple[int, tuple[int, ...]], np.ndarray],
    coords: np.ndarray | None = None,
) -> list[list[tuple[int, tuple[int, ...], np.ndarray]]]:
    """Pointwise partial of each term with respect to each of its fields.

    Returns, per term, a list of ``(state, deriv, partial)`` where
    ``partial[c]`` is the derivative of the term value at collocation point
    ``c`` with respect to the field value there.
    """
    out = []
    for term in descriptors:
        rows = []
        base = None
        if term.forcing is not None and term.forcing != "const":
            if coords is None:
                raise ConfigError(
                    f"forcing term {term.forcing!r} needs collocation coordinates"
                )
            pts = np.asarray(coords, dtype=float)
            if pts.ndim == 1:
                pts = pts[:, None]
            base = FORCINGS[term.forcing](pts)
        for state, deriv, exp in term.factors:
            val = fields[(state, deriv)]
            part = exp * val ** (exp - 1) if exp > 1 else np.ones_like(val)
            for other_state, other_deriv, other_exp in term.factors:
                if (other_state, other_deriv) == (state, deriv):
                    continue
                part = part * fields[(other_state, other_deriv)] ** other_exp
            if base is not None:
                part = part * base
            rows.append((state, deriv, part))
        out.append(rows)
    return out


def library_jacobian_theta(
    descriptors: tuple[TermDescriptor, ...],
    theta: np.ndarray,
    basis_by_deriv: dict[tuple[int, ...], BasisMatrix],
    coords: np.ndarray | None = None,
) -> list[sp.csr_matrix]:
    """Per-column Jacobians of the library with respect to control points.

    Control points are flattened state-major: entry ``state * nb + b`` is
    basis coefficient ``b`` of that state.  Forcing-only columns yield an
    all-zero (empty) sparse Jacobian.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        theta = theta[:, None]
    nb, num_states = theta.shape
    fields = reconstruct_fields(descriptors, theta, basis_by_deriv)
    partials = term_partials(descriptors, fields, coords)
    npts = next(iter(basis_by_deriv.values())).num_points
    jacobians = []
    for rows in partials:
        acc: dict[int, sp.csr_matrix] = {}
        for state, deriv, part in rows:
            block = sp.diags(part) @ basis_by_deriv[deriv].matrix
            acc[state] = acc.get(state) + block if state in acc else block
        blocks = [
            acc.get(state, sp.csr_matrix((npts, nb))) for state in range(num_states)
        ]
        jacobians.append(sp.hstack(blocks, format="csr"))
    return jacobians


def polynomial_rhs(descriptors, coefficients):
    """Right-hand-side function ``u -> coefficients.T @ phi(u)``.

    Only derivative-free libraries define a state-space vector field; any
    derivative factor raises :class:`ConfigError`.
    """
    coefficients = np.asarray(coefficients, dtype=float)
    for term in descriptors:
        if term.max_deriv_order > 0:
            raise ConfigError(
                "library with derivative terms has no state-space right-hand side")
        if term.forcing is not None and term.forcing != "const":
            raise ConfigError(
                f"coordinate forcing {term.forcing!r} not allowed in an autonomous system")

    def rhs(t, u):
        vals = np.empty(len(descriptors))
        for i, term in enumerate(descriptors):
            v = 1.0
            for state, _, exp in term.factors:
                v *= u[state] ** exp
            vals[i] = v
        return vals @ coefficients

    return rhs


def render_equation(
    lhs: str,
    descriptors: tuple[TermDescriptor, ...],
    coeffs: np.ndarray,
    stds: np.ndarray | None = None,
    state_names: tuple[str, ...] = ("u",),
    axes: tuple[str, ...] = ("x", "t"),
) -> str:
    """Format a discovered equation like ``u_t = -0.9988(±0.024)u_x``.

    Coefficients print with four decimal places, uncertainties with four
    significant digits; zero coefficients are skipped and an all-zero
    right-hand side renders as ``<lhs> = 0``.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if len(coeffs) != len(descriptors):
        raise ConfigError(
            f"{len(coeffs)} coefficients for {len(descriptors)} descriptors"
        )
    if stds is not None and len(stds) != len(coeffs):
        raise ConfigError("stds length must match coefficients")
    pieces = []
    for i, (term, value) in enumerate(zip(descriptors, coeffs)):
        if value == 0.0:
            continue
        text = f"{value:+.4f}"
        if stds is not None:
            text += f"(±{stds[i]:.4g})"
        label = term.label(state_names, axes)
        if label != "1":
            text += label
        pieces.append(text)
    if not pieces:
        return f"{lhs} = 0"
    body = "".join(pieces)
    if body.startswith("+"):
        body = body[1:]
    return f"{lhs} = {body}"
