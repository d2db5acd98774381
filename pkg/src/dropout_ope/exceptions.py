"""Exception hierarchy for dropout_ope.

All library-raised errors derive from :class:`DropoutOPEError` so callers can
catch a single type at the replication level.
"""


class DropoutOPEError(Exception):
    """Base class for all dropout_ope errors."""


class ConfigurationError(DropoutOPEError):
    """Invalid user-supplied configuration (sample sizes, discount, alpha)."""


class StateError(DropoutOPEError):
    """Operation applied to data in the wrong state (e.g. dropout twice)."""


class DegenerateDataError(DropoutOPEError):
    """Data too degenerate for the requested operation (constant columns, ties)."""


class BasisConstructionError(DropoutOPEError):
    """Spline basis could not be constructed from the given knots/data."""


class ShapeError(DropoutOPEError):
    """Array dimensions do not match the fitted objects."""


class EstimationError(DropoutOPEError):
    """A fit did not converge or a linear system was numerically singular."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NumericalError(DropoutOPEError):
    """A numerical invariant was violated (negative variance, singular solve)."""
