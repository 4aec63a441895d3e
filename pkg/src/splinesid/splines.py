"""B-spline bases for state reconstruction.

Measurements of a trajectory or field are represented as a linear
combination of B-spline basis functions, so that values and derivatives at
arbitrary points become sparse-matrix products against a vector of control
points.  The module provides

* clamped knot vectors with uniform interior spacing,
* scalar recursive evaluation of basis functions and their derivatives,
* vectorized assembly of sparse basis matrices in one and two dimensions
  (two-dimensional bases are tensor products of per-axis bases),
* least-squares fitting of control points to scattered data.

Conventions: knot spans are half open ``[tau_s, tau_{s+1})`` and are closed
on the right at the global right endpoint, so the basis sums to one on the
whole closed domain.  A two-dimensional basis function with per-axis indices
``(s1, s2)`` maps to flat column ``s1 * nb2 + s2`` where ``nb2`` is the
number of basis functions on the second axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, DomainError, SingularBasisError

__all__ = [
    "KnotVector",
    "BasisMatrix",
    "uniform_clamped_knots",
    "eval_basis",
    "eval_basis_deriv",
    "build_basis_matrix",
    "fit_least_squares",
    "fit_ridge",
]


@dataclass(frozen=True)
class KnotVector:
    """Nondecreasing knot sequence plus polynomial degree.

    Attributes
    ----------
    knots : ndarray
        Knot positions, length ``num_basis + degree + 1``.
    degree : int
        Polynomial degree of the basis (>= 1 for derivative work).
    """

    knots: np.ndarray
    degree: int

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        if self.degree < 0:
            raise ConfigError(f"degree must be nonnegative, got {self.degree}")
        if knots.ndim != 1 or knots.size < 2 * (self.degree + 1):
            raise ConfigError(
                f"knot vector of length {knots.size} too short for degree {self.degree}"
            )
        if np.any(np.diff(knots) < 0):
            raise ConfigError("knot vector must be nondecreasing")

    @property
    def num_basis(self) -> int:
        """Number of basis functions supported by this knot vector."""
        return self.knots.size - self.degree - 1

    @property
    def domain(self) -> tuple[float, float]:
        """Closed interval on which the basis is defined."""
        return float(self.knots[self.degree]), float(self.knots[-self.degree - 1])


def uniform_clamped_knots(start: float, stop: float, num_basis: int, degree: int) -> KnotVector:
    """Clamped knot vector with uniform interior spacing.

    The endpoints are repeated ``degree + 1`` times so the basis
    interpolates the ends of the domain.

    Parameters
    ----------
    start, stop : float
        Domain endpoints, ``start < stop``.
    num_basis : int
        Number of basis functions (control points); must exceed ``degree``.
    degree : int
        Polynomial degree.
    """
    if not stop > start:
        raise ConfigError(f"empty domain [{start}, {stop}]")
    if num_basis <= degree:
        raise ConfigError(
            f"need more than degree={degree} basis functions, got {num_basis}"
        )
    segments = num_basis - degree
    interior = np.linspace(start, stop, segments + 1)
    knots = np.concatenate(
        [np.full(degree, start), interior, np.full(degree, stop)]
    )
    return KnotVector(knots, degree)


def _check_domain(kv: KnotVector, t: np.ndarray) -> None:
    lo, hi = kv.domain
    bad = ~((t >= lo) & (t <= hi))
    if np.any(bad):
        offender = float(np.asarray(t)[bad].ravel()[0])
        raise DomainError(
            f"point {offender!r} outside knot domain [{lo}, {hi}]"
        )


def eval_basis(kv: KnotVector, s: int, t: float) -> float:
    """Evaluate basis function ``N_{s,degree}`` at scalar ``t``.

    Direct two-term recursion on the degree; indeterminate ``0/0`` terms
    arising from repeated knots contribute zero.  Spans are half open and
    the final span is closed at the right end of the domain.
    """
    if not 0 <= s < kv.num_basis:
        raise ConfigError(f"basis index {s} out of range [0, {kv.num_basis})")
    t_arr = np.asarray(float(t))
    _check_domain(kv, t_arr)
    return _eval_recursive(kv.knots, kv.domain[1], s, kv.degree, float(t))


def _eval_recursive(knots: np.ndarray, right_end: float, s: int, k: int, t: float) -> float:
    if k == 0:
        if knots[s] <= t < knots[s + 1]:
            return 1.0
        # right-closure of the last nonempty span
        if t == right_end and knots[s] < knots[s + 1] == right_end:
            return 1.0
        return 0.0
    total = 0.0
    d1 = knots[s + k] - knots[s]
    if d1 > 0.0:
        total += (t - knots[s]) / d1 * _eval_recursive(knots, right_end, s, k - 1, t)
    d2 = knots[s + k + 1] - knots[s + 1]
    if d2 > 0.0:
        total += (knots[s + k + 1] - t) / d2 * _eval_recursive(knots, right_end, s + 1, k - 1, t)
    return total


def eval_basis_deriv(kv: KnotVector, s: int, t: float, order: int = 1) -> float:
    """Evaluate the ``order``-th derivative of ``N_{s,degree}`` at ``t``.

    Uses the analytic derivative recursion: the derivative of a degree-k
    basis function is a weighted difference of two degree-(k-1) functions,
    applied recursively for higher orders.  Orders above the degree are
    identically zero.
    """
    if order < 0:
        raise ConfigError(f"derivative order must be nonnegative, got {order}")
    if not 0 <= s < kv.num_basis:
        raise ConfigError(f"basis index {s} out of range [0, {kv.num_basis})")
    t_arr = np.asarray(float(t))
    _check_domain(kv, t_arr)
    return _deriv_recursive(kv.knots, kv.domain[1], s, kv.degree, float(t), order)


def _deriv_recursive(
    knots: np.ndarray, right_end: float, s: int, k: int, t: float, q: int
) -> float:
    if q == 0:
        return _eval_recursive(knots, right_end, s, k, t)
    if k == 0:
        return 0.0
    total = 0.0
    d1 = knots[s + k] - knots[s]
    if d1 > 0.0:
        total += k / d1 * _deriv_recursive(knots, right_end, s, k - 1, t, q - 1)
    d2 = knots[s + k + 1] - knots[s + 1]
    if d2 > 0.0:
        total -= k / d2 * _deriv_recursive(knots, right_end, s + 1, k - 1, t, q - 1)
    return total


def _find_spans(kv: KnotVector, t: np.ndarray) -> np.ndarray:
    """Index ``j`` of the knot span containing each point."""
    j = np.searchsorted(kv.knots, t, side="right") - 1
    return np.clip(j, kv.degree, kv.num_basis - 1)


def _nonzero_values(kv: KnotVector, t: np.ndarray, deriv: int) -> tuple[np.ndarray, np.ndarray]:
    """Spans and values of the ``degree + 1`` nonzero (derivatives of) basis
    functions at each point.

    Returns ``(spans, vals)`` where ``vals[n, i]`` is the ``deriv``-th
    derivative of ``N_{spans[n] - degree + i, degree}`` at ``t[n]``.
    """
    k = kv.degree
    knots = kv.knots
    t = np.asarray(t, dtype=float).ravel()
    npts = t.size
    j = _find_spans(kv, t)
    if deriv > k:
        return j, np.zeros((npts, k + 1))

    # triangular evaluation at reduced degree k - deriv
    p0 = k - deriv
    vals = np.ones((npts, 1))
    left = np.empty((p0 + 1, npts))
    right = np.empty((p0 + 1, npts))
    for r in range(1, p0 + 1):
        left[r] = t - knots[j + 1 - r]
        right[r] = knots[j + r] - t
        new = np.empty((npts, r + 1))
        saved = np.zeros(npts)
        for l in range(r):
            denom = right[l + 1] + left[r - l]
            temp = np.where(denom != 0.0, vals[:, l] / np.where(denom == 0.0, 1.0, denom), 0.0)
            new[:, l] = saved + right[l + 1] * temp
            saved = left[r - l] * temp
        new[:, r] = saved
        vals = new

    # lift degree while differentiating: values of the (p - p0)-th derivative
    # of degree-p functions from the (p - p0 - 1)-th of degree-(p - 1)
    for p in range(p0 + 1, k + 1):
        new = np.zeros((npts, p + 1))
        for i in range(p + 1):
            s = j - p + i
            acc = np.zeros(npts)
            if i >= 1:
                d1 = knots[s + p] - knots[s]
                acc += np.where(d1 > 0.0, vals[:, i - 1] / np.where(d1 == 0.0, 1.0, d1), 0.0)
            if i <= p - 1:
                d2 = knots[s + p + 1] - knots[s + 1]
                acc -= np.where(d2 > 0.0, vals[:, i] / np.where(d2 == 0.0, 1.0, d2), 0.0)
            new[:, i] = p * acc
        vals = new
    return j, vals


@dataclass(frozen=True)
class BasisMatrix:
    """Sparse evaluation of a basis (or a derivative of it) at many points.

    ``matrix[n, c]`` is the value of basis function ``c`` (flat index) at
    point ``n``.  Only the locally supported entries are stored.

    Attributes
    ----------
    matrix : scipy.sparse.csr_matrix
        Shape ``(num_points, num_basis)``.
    deriv : tuple of int
        Per-axis derivative orders this matrix realizes.
    knot_vectors : tuple of KnotVector
        One per axis.
    """

    matrix: sp.csr_matrix
    deriv: tuple[int, ...]
    knot_vectors: tuple[KnotVector, ...]

    @property
    def num_points(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_basis(self) -> int:
        return self.matrix.shape[1]


def build_basis_matrix(
    knots: KnotVector | tuple[KnotVector, KnotVector],
    points: np.ndarray,
    deriv: int | tuple[int, ...] = 0,
) -> BasisMatrix:
    """Assemble the sparse matrix of basis (derivative) values at points.

    Parameters
    ----------
    knots : KnotVector or pair of KnotVector
        One knot vector per axis; a pair builds the tensor-product basis.
    points : ndarray
        Shape ``(n,)`` for one axis or ``(n, 2)`` for two.
    deriv : int or tuple of int
        Derivative order per axis.

    Raises
    ------
    DomainError
        If any point falls outside the knot domain of its axis.
    """
    if isinstance(knots, KnotVector):
        axes = (knots,)
        orders = (deriv,) if np.isscalar(deriv) else tuple(deriv)
    else:
        axes = tuple(knots)
        orders = (deriv, deriv) if np.isscalar(deriv) else tuple(deriv)
    if len(orders) != len(axes):
        raise ConfigError(
            f"got {len(orders)} derivative orders for {len(axes)} axes"
        )

    pts = np.asarray(points, dtype=float)
    if len(axes) == 1:
        pts = pts.ravel()
        _check_domain(axes[0], pts)
        spans, vals = _nonzero_values(axes[0], pts, orders[0])
        k = axes[0].degree
        npts = pts.size
        rows = np.repeat(np.arange(npts), k + 1)
        cols = (spans[:, None] - k + np.arange(k + 1)).ravel()
        mat = sp.csr_matrix(
            (vals.ravel(), (rows, cols)), shape=(npts, axes[0].num_basis)
        )
    else:
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ConfigError(f"expected (n, 2) points, got shape {pts.shape}")
        kv1, kv2 = axes
        _check_domain(kv1, pts[:, 0])
        _check_domain(kv2, pts[:, 1])
        j1, v1 = _nonzero_values(kv1, pts[:, 0], orders[0])
        j2, v2 = _nonzero_values(kv2, pts[:, 1], orders[1])
        k1, k2 = kv1.degree, kv2.degree
        npts = pts.shape[0]
        nb2 = kv2.num_basis
        vals = np.einsum("ni,nj->nij", v1, v2).reshape(npts, -1)
        c1 = j1[:, None] - k1 + np.arange(k1 + 1)
        c2 = j2[:, None] - k2 + np.arange(k2 + 1)
        cols = (c1[:, :, None] * nb2 + c2[:, None, :]).reshape(npts, -1)
        rows = np.repeat(np.arange(npts), (k1 + 1) * (k2 + 1))
        mat = sp.csr_matrix(
            (vals.ravel(), (rows, cols.ravel())),
            shape=(npts, kv1.num_basis * nb2),
        )
    mat.eliminate_zeros()
    mat.sort_indices()
    return BasisMatrix(mat, orders, axes)


def fit_least_squares(basis: BasisMatrix, values: np.ndarray) -> np.ndarray:
    """Control points minimizing ``||basis @ theta - values||``.

    Solves the normal equations with a sparse factorization.  ``values``
    may hold several states as columns; the result has one control-point
    column per state.

    Raises
    ------
    SingularBasisError
        If the system is underdetermined or the normal equations are
        (numerically) singular; reduce the number of control points.
    """
    vals = np.asarray(values, dtype=float)
    squeeze = vals.ndim == 1
    if squeeze:
        vals = vals[:, None]
    if vals.shape[0] != basis.num_points:
        raise ConfigError(
            f"{vals.shape[0]} data rows for a basis evaluated at {basis.num_points} points"
        )
    if basis.num_points < basis.num_basis:
        raise SingularBasisError(
            f"underdetermined fit: {basis.num_points} points for "
            f"{basis.num_basis} control points; reduce control points"
        )
    mat = basis.matrix
    gram = (mat.T @ mat).tocsc()
    rhs = mat.T @ vals
    try:
        factor = spla.splu(gram)
        theta = factor.solve(rhs)
    except RuntimeError as exc:
        raise SingularBasisError(
            f"singular normal equations ({exc}); reduce control points"
        ) from exc
    if not np.all(np.isfinite(theta)):
        raise SingularBasisError(
            "non-finite control points from normal equations; reduce control points"
        )
    resid = gram @ theta - rhs
    scale = max(float(np.linalg.norm(rhs)), 1e-30)
    if np.linalg.norm(resid) > 1e-6 * scale:
        raise SingularBasisError(
            "rank-deficient normal equations; reduce control points"
        )
    return theta[:, 0] if squeeze else theta


def fit_ridge(basis: BasisMatrix, values: np.ndarray, damping: float = 1e-8) -> np.ndarray:
    """Ridge-regularized control-point fit.

    Usable when the basis has more control points than data points (the
    strict least-squares fit refuses that case).  ``damping`` is relative
    to the mean diagonal of the Gram matrix.
    """
    vals = np.asarray(values, dtype=float)
    squeeze = vals.ndim == 1
    if squeeze:
        vals = vals[:, None]
    mat = basis.matrix
    gram = (mat.T @ mat).tocsc()
    lam = damping * max(float(gram.diagonal().mean()), 1e-30)
    gram = gram + lam * sp.identity(basis.num_basis, format="csc")
    theta = spla.splu(gram).solve(mat.T @ vals)
    return theta[:, 0] if squeeze else theta
