"""Exception types raised across the package."""

from __future__ import annotations


class PolyCTError(Exception):
    """Base class for all package errors."""


class InvalidArgument(PolyCTError, ValueError):
    pass


class CoverageError(PolyCTError, ValueError):
    """Mass-attenuation range of a curve falls outside the knot grid."""


class InvalidCurve(PolyCTError, ValueError):
    pass


class AmbiguityShiftUnavailable(PolyCTError, ValueError):
    """Shift requires a zero boundary coefficient that is not present."""


class DegenerateSpectrum(PolyCTError, ValueError):
    pass


class InvalidMeasurement(PolyCTError, ValueError):
    pass


class InvalidGeometry(PolyCTError, ValueError):
    pass


class ProxDiverged(PolyCTError, RuntimeError):
    pass


class StepSizeUnderflow(PolyCTError, RuntimeError):
    pass


class InvalidState(PolyCTError, RuntimeError):
    pass


class CalibrationFailure(PolyCTError, RuntimeError):
    pass


class UndefinedMetric(PolyCTError, ValueError):
    pass
