"""Assembly of the spline regression problem behind a discovery run.

A problem bundles the measurement basis (states at data points), the
left-hand-side derivative basis at collocation points, and every library
derivative basis, so the trainer touches only prebuilt sparse matrices.
Collocation points are an evenly spaced grid denser than the data by a
configurable factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .library import TermDescriptor, required_fields
from .splines import (
    BasisMatrix,
    KnotVector,
    build_basis_matrix,
    uniform_clamped_knots,
)
from .systems import Dataset, default_library

__all__ = ["DiscoveryProblem", "build_problem", "collocation_points"]


@dataclass(frozen=True)
class DiscoveryProblem:
    """Prebuilt bases and candidate library for one dataset."""

    dataset: Dataset
    descriptors: tuple[TermDescriptor, ...]
    knot_vectors: tuple[KnotVector, ...]
    basis_measure: BasisMatrix
    lhs_basis: BasisMatrix
    basis_by_deriv: dict[tuple[int, ...], BasisMatrix]
    colloc_coords: np.ndarray

    @property
    def num_states(self) -> int:
        return self.dataset.values.shape[1]

    @property
    def num_basis(self) -> int:
        return self.basis_measure.num_basis

    @property
    def num_colloc(self) -> int:
        return self.lhs_basis.num_points

    @property
    def num_terms(self) -> int:
        return len(self.descriptors)


def collocation_points(dataset: Dataset, factor: float) -> np.ndarray:
    """Evenly spaced points covering the data domain, ``factor`` times denser.

    On a plane the factor splits evenly between the axes.
    """
    if factor <= 0:
        raise ConfigError(f"collocation factor must be positive, got {factor}")
    coords = dataset.coords
    if coords.ndim == 1:
        count = max(2, math.ceil(factor * coords.shape[0]))
        return np.linspace(coords.min(), coords.max(), count)
    if dataset.grid_shape is not None:
        base = dataset.grid_shape
    else:
        side = math.ceil(math.sqrt(coords.shape[0]))
        base = (side, side)
    axis_factor = math.sqrt(factor)
    counts = [max(2, math.ceil(axis_factor * b)) for b in base]
    grids = [
        np.linspace(coords[:, ax].min(), coords[:, ax].max(), counts[ax])
        for ax in range(2)
    ]
    xx, yy = np.meshgrid(grids[0], grids[1], indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def build_problem(
    dataset: Dataset,
    num_basis: int | tuple[int, int],
    degree: int = 5,
    collocation_factor: float = 4.0,
    descriptors: tuple[TermDescriptor, ...] | None = None,
) -> DiscoveryProblem:
    """Build knot vectors, sparse basis matrices, and the term library.

    ``num_basis`` is the control-point count, per axis for plane problems.
    The spline degree must exceed every derivative order the problem needs.
    """
    if descriptors is None:
        descriptors = default_library(dataset.benchmark)
    coords = dataset.coords
    naxes = 1 if coords.ndim == 1 else coords.shape[1]
    if np.ndim(num_basis) == 0:
        basis_counts = (int(num_basis),) * naxes
    else:
        basis_counts = tuple(int(b) for b in num_basis)
    if len(basis_counts) != naxes:
        raise ConfigError(
            f"{len(basis_counts)} basis counts for {naxes} axes")

    lhs_deriv = tuple(dataset.benchmark.lhs_deriv)
    max_deriv = max(
        [max(deriv) for _, deriv in required_fields(descriptors)]
        + [max(lhs_deriv)],
        default=0,
    )
    if degree <= max_deriv:
        raise ConfigError(
            f"spline degree {degree} cannot carry order-{max_deriv} derivatives")
    for count in basis_counts:
        if count < degree + 1:
            raise ConfigError(
                f"need at least {degree + 1} control points, got {count}")

    if naxes == 1:
        knots = uniform_clamped_knots(
            coords.min(), coords.max(), basis_counts[0], degree)
        knot_vectors = (knots,)
        build_knots = knots
    else:
        knot_vectors = tuple(
            uniform_clamped_knots(
                coords[:, ax].min(), coords[:, ax].max(),
                basis_counts[ax], degree)
            for ax in range(2)
        )
        build_knots = knot_vectors

    colloc = collocation_points(dataset, collocation_factor)
    zero = (0,) * naxes
    basis_measure = build_basis_matrix(build_knots, coords, zero)
    lhs_basis = build_basis_matrix(build_knots, colloc, lhs_deriv)
    derivs = {deriv for _, deriv in required_fields(descriptors)}
    derivs.add(zero)
    basis_by_deriv = {
        deriv: build_basis_matrix(build_knots, colloc, deriv)
        for deriv in sorted(derivs)
    }
    return DiscoveryProblem(
        dataset=dataset,
        descriptors=tuple(descriptors),
        knot_vectors=knot_vectors,
        basis_measure=basis_measure,
        lhs_basis=lhs_basis,
        basis_by_deriv=basis_by_deriv,
        colloc_coords=colloc,
    )
