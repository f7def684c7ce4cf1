"""Exception hierarchy.

The CLI maps these onto exit codes: :class:`ConfigError` -> 1,
:class:`DataError` -> 2, :class:`NumericalError` -> 3.
"""


class ZplQeError(Exception):
    """Base class for all package errors."""


class DomainError(ZplQeError, ValueError):
    """An argument lies outside the domain of a physical formula."""


class SingularityError(DomainError):
    """A formula diverges for the requested input (e.g. a vertical dipole)."""


class DetectorSaturationError(DomainError):
    """Measured rate at or above the detector ceiling ``1/tau_dead``."""


class ConfigError(ZplQeError):
    """Invalid run configuration. ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DataError(ZplQeError):
    """Unreadable, malformed or insufficient input data."""


class InsufficientDataError(DataError):
    pass


class NumericalError(ZplQeError):
    """A numerical procedure failed."""


class FitError(NumericalError):
    pass


class ConvergenceError(FitError):
    pass


class DegenerateDataError(FitError):
    """The data carry no information about the model (e.g. a flat scan)."""


class InsufficientSaturationError(FitError):
    """The power series never drives the emitter far enough into saturation."""
