"""Exception hierarchy shared by the library and the command line."""


class FidcalError(Exception):
    """Base class for all package errors."""


class DataError(FidcalError, ValueError):
    """Input data is malformed or violates a dataset invariant."""


class ConfigurationError(FidcalError, ValueError):
    """Invalid settings: dimensions, levels, quadrature order, presets."""


class DomainError(FidcalError, ValueError):
    """An argument lies outside the domain of the model (e.g. x < 0)."""


class InsufficientDataError(FidcalError):
    """Not enough replicates or levels for the requested estimator."""


class DegenerateDrawError(FidcalError):
    """An auxiliary draw produced an undefined pivot."""


class UndefinedPivotError(FidcalError):
    """A pivot denominator vanishes for structural reasons."""


class QueryError(FidcalError, ValueError):
    """A calibration query references labs missing from the training data."""


class EstimationError(FidcalError):
    """A numerical estimation step failed to converge."""


class UnavailableSEError(EstimationError):
    """Standard errors cannot be formed (singular information)."""


class InsufficientSampleError(FidcalError):
    """Too few fiducial values to estimate a density."""
