"""Exception hierarchy shared by every actkit module."""


class ActError(Exception):
    """Base class for all actkit errors."""


class ShapeError(ActError, ValueError):
    """Array operands have incompatible shapes."""


class InvalidInputError(ActError, ValueError):
    """Numerical input is invalid (NaN, empty, out of range)."""


class DegenerateMatrixError(ActError, ValueError):
    """A centered matrix has (numerically) zero Frobenius norm."""


class DegenerateDistributionError(ActError, ValueError):
    """A weight vector has zero total mass."""


class InsufficientDataError(ActError, ValueError):
    """Too few decode steps to compute temporal similarity."""


class IncompleteCalibrationError(ActError, ValueError):
    """Calibration data does not cover every (layer, head)."""


class IncompleteManifestError(ActError, KeyError):
    """A head address is missing from a profile manifest."""


class ConfigError(ActError, ValueError):
    """Invalid configuration or usage."""


class InternalStateError(ActError, RuntimeError):
    """Decoder caches or branch state became inconsistent."""


class TraceFormatError(ActError, ValueError):
    """Malformed ATRC file.

    Parameters
    ----------
    field : str
        Header field (or ``"payload"``) that failed validation.
    offset : int
        Byte offset of the offending field within the file.
    """

    def __init__(self, message, field, offset):
        super().__init__(f"{message} (field={field!r}, byte offset {offset})")
        self.field = field
        self.offset = offset


class BadMagicError(TraceFormatError):
    pass


class BadVersionError(TraceFormatError):
    pass


class BadDimensionError(TraceFormatError):
    pass


class PayloadLengthError(TraceFormatError):
    pass


class NonFiniteTraceError(TraceFormatError):
    pass


class CalibrationMismatchError(ActError, ValueError):
    """Calibration traces disagree on dimensions."""
