"""Exception types shared across the package."""


class LeviRenormError(Exception):
    """Base class for all package errors."""


class NonPositiveDefinite(LeviRenormError, ValueError):
    """A diffusion matrix failed the ellipticity check."""

    def __init__(self, message, point=None):
        if point is not None:
            message = f"{message} at point {tuple(float(p) for p in point)}"
        super().__init__(message)
        self.point = point


class TimeOrder(LeviRenormError, ValueError):
    """A kernel was evaluated with target time not after source time."""


class QuadratureBudgetExceeded(LeviRenormError, RuntimeError):
    """A quadrature would need more nodes than the configured limit."""


class UnresolvableEpsilon(LeviRenormError, ValueError):
    """The mollification scale is below what the grid resolves."""


class UnsupportedGraph(LeviRenormError, ValueError):
    """The requested diagram or scheme combination is not available."""


class SolveFailure(LeviRenormError, RuntimeError):
    """The implicit linear solve did not produce a finite result."""


class BlowUp(LeviRenormError, RuntimeError):
    """The solution exceeded the blow-up guard."""


class ConfigError(LeviRenormError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field
