"""Discovery of sparse governing equations from noisy measurements.

The pipeline reconstructs states with B-splines, fits a sparse linear
combination of candidate terms to the reconstructed dynamics through an
alternating scheme of gradient optimization and Bayesian pruning, quantifies
coefficient uncertainty by weight averaging, and propagates or assimilates
the resulting model ensemble.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DiscoveryFailure,
    DivergenceError,
    DomainError,
    SingularBasisError,
    SplinesidError,
    TrainingError,
)
from .splines import (
    BasisMatrix,
    KnotVector,
    build_basis_matrix,
    eval_basis,
    eval_basis_deriv,
    fit_least_squares,
    uniform_clamped_knots,
)

__all__ = [
    "__version__",
    "ConfigError",
    "DiscoveryFailure",
    "DivergenceError",
    "DomainError",
    "SingularBasisError",
    "SplinesidError",
    "TrainingError",
    "BasisMatrix",
    "KnotVector",
    "build_basis_matrix",
    "eval_basis",
    "eval_basis_deriv",
    "fit_least_squares",
    "uniform_clamped_knots",
]
