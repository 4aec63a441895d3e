"""Exception taxonomy shared across the package.

Every failure mode that callers are expected to handle gets its own type so
the command line front end can map them onto stable exit codes:
configuration and input problems exit 1, discovery failures exit 2, and
numerical breakdowns exit 3.
"""


class SplinesidError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SplinesidError):
    """Invalid configuration, incompatible shapes, or bad user input."""


class DomainError(ConfigError):
    """Evaluation point lies outside the knot-vector domain."""


class SingularBasisError(SplinesidError):
    """Normal equations of a spline fit are singular or rank deficient."""


class DivergenceError(SplinesidError):
    """Numerical integration produced a non-finite state.

    Carries the step index at which divergence was detected.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class TrainingError(SplinesidError):
    """Optimization aborted: non-finite loss or sustained divergence."""


class DiscoveryFailure(SplinesidError):
    """Sparse regression produced an empty or unusable model."""
