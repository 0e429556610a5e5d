"""Exception and warning taxonomy shared by all capharm modules."""

from __future__ import annotations


class CapharmError(Exception):
    """Base class for all capharm errors."""


class ParseError(CapharmError):
    """A mesh or data file could not be parsed under the declared format."""


class IoError(CapharmError):
    """A file could not be read or written."""


class TopologyError(CapharmError):
    """The mesh violates the disk-topology requirements of the pipeline."""


class DomainError(CapharmError):
    """An argument is outside the mathematical domain of an operation."""


class NoConvergence(CapharmError):
    """Neither evaluation path reached the requested tolerance."""


class ConvergenceError(CapharmError):
    """An iterative geometric solver failed to converge."""


class RootMissed(CapharmError):
    """The eigenvalue scan exhausted its budget before finding a root."""

    def __init__(self, message, m=None, k=None):
        super().__init__(message)
        self.m = m
        self.k = k


class ChecksumMismatch(IoError):
    """A cached file failed its integrity check."""


class EigenTableMismatch(CapharmError):
    """An eigenvalue table does not cover the requested basis."""


class Underdetermined(CapharmError):
    """Fewer sample points than basis columns in a least-squares fit."""


class DegenerateFace(CapharmError):
    """A zero-area face makes a distortion measure undefined."""


class DegenerateFdec(CapharmError):
    """The first-degree coefficients carry no usable shape content."""


class InsufficientPoints(CapharmError):
    """Too few usable spectrum points for a power-law fit."""


class ThetaCMismatch(CapharmError):
    """Source coefficients and donor parameterisation disagree on theta_c."""


class WindowOutOfRange(CapharmError):
    """A spectral window exceeds the available coefficient range."""


class IllConditionedWarning(UserWarning):
    """The least-squares basis matrix is poorly conditioned."""


class OversamplingWarning(UserWarning):
    """The vertex count is below the recommended oversampling factor."""


class NonFractalWarning(UserWarning):
    """A fitted Hurst exponent fell outside the fractal range (0, 1)."""


class AsymmetryWarning(UserWarning):
    """Fitted coefficients deviate from the real-signal conjugate symmetry."""
