class GdallocError(Exception):
    """Base class for errors raised by this package."""


class InfeasibleError(GdallocError):
    """A flow or allocation problem has no feasible point.

    ``where`` names the offending node, campaign, or side constraint when it
    can be identified.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class StructuralError(GdallocError, ValueError):
    """Input refers to ids or edges that do not exist, or is malformed."""


class NonConvergenceError(GdallocError):
    """An iterative solver hit its iteration cap before meeting tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class UndefinedGammaError(GdallocError):
    """The floor multiplier is zero, so there is no finite equivalent weight."""
