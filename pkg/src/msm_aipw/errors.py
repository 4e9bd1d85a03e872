"""Exception types shared across the package."""


class DataError(ValueError):
    """Malformed or unusable survival data."""


class NuisanceError(RuntimeError):
    """A working model could not be fitted."""


class SeparationError(NuisanceError):
    """Coefficients diverge: perfect separation or monotone likelihood."""


class SolverError(RuntimeError):
    """An estimating equation could not be solved."""


class DegenerateInformationError(SolverError):
    """The information (variance denominator) is zero."""
