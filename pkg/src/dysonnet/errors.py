"""Exception hierarchy shared across the package.

The split mirrors the failure modes callers are expected to distinguish:
bad identifiers or invalid probability data (:class:`DomainError`),
incompatible array dimensions (:class:`ShapeError`), exceeded enumeration
budgets (:class:`CapacityError`), and numerical failures
(:class:`NumericError` and its convergence/stability refinements).
"""


class DysonnetError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(DysonnetError):
    """An argument is outside its documented domain (unknown id, invalid pmf, ...)."""


class ShapeError(DysonnetError):
    """Array dimensions do not compose."""


class CapacityError(DysonnetError):
    """An exact enumeration would exceed the configured state budget."""


class NumericError(DysonnetError):
    """A numerical routine failed (non-finite input, eigensolver failure, ...)."""


class ConvergenceError(NumericError):
    """An iterative solver did not reach its tolerance.

    Attributes
    ----------
    residual : float
        Last residual observed before giving up.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class StabilityError(NumericError):
    """An iterate left the admissible region (e.g. lost positive imaginary part)."""
