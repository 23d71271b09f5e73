"""Exception hierarchy shared across the package."""

from __future__ import annotations


class GmesError(Exception):
    """Base class for all package-specific errors."""


class FactorizationError(GmesError):
    """A covariance matrix was not numerically positive definite.

    Typically signals duplicate points with zero observation noise or
    corrupt kernel parameters.
    """


class NumericalVarianceError(GmesError):
    """A posterior variance fell below the round-off floor.

    Values in [-1e-9 * signal_variance, 0) are clamped to zero; anything
    more negative indicates a bug rather than round-off and raises this.
    """


class DegenerateVarianceError(GmesError):
    """Residual variance at the anchor point fell below the numerical floor."""


class OutOfDomainError(GmesError):
    """A query point lies outside the declared domain box or arena."""


class BarrierDomainError(GmesError):
    """A pairwise distance is at or below the separation radius, so the
    log-barrier is undefined."""


class BatchInitError(GmesError):
    """Could not place the requested number of separated points in the box."""


class SafetyViolationError(GmesError):
    """Two simulated robots came closer than the safe distance."""


class ConfigError(GmesError):
    """Invalid experiment configuration; ``problems`` lists every violation."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ExperimentError(GmesError):
    """A run failed; carries the iteration index where it happened."""

    def __init__(self, iteration: int, cause: Exception):
        self.iteration = iteration
        self.cause = cause
        super().__init__(f"iteration {iteration}: {cause}")
