"""Exception types raised across the package."""


class AvagenError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(AvagenError):
    """An array does not match the shape a network or segment expects.

    Carries the name of the offending segment/argument so callers can
    report exactly which piece of the model disagreed.
    """

    def __init__(self, segment, expected, got):
        self.segment = segment
        self.expected = expected
        self.got = got
        super().__init__(f"dimension mismatch in '{segment}': expected {expected}, got {got}")


class NoCrossing(AvagenError):
    """Secant search was handed a bracket with no sign change."""


class DegenerateNormal(AvagenError):
    """Raw normal-head output has (near-)zero length and cannot be normalized."""


class SingularBlend(AvagenError):
    """Blended rotation matrix is numerically singular (condition number too large)."""


class FileFormatError(AvagenError):
    """Binary file does not start with the expected magic bytes."""


class FileVersionError(AvagenError):
    """Binary file declares an unsupported format version."""


class FileLengthError(AvagenError):
    """Binary file payload is shorter than its declared record counts."""

    def __init__(self, what, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"truncated {what}: declared {expected}, found {actual}")


class ConfigError(AvagenError):
    """Run configuration failed validation."""


class TrainingDiverged(AvagenError):
    """A loss became non-finite during optimization."""
