"""Exception hierarchy shared by every pipeline stage."""


class Flow4DError(Exception):
    """Base class for all package errors."""


class ValidationError(Flow4DError, ValueError):
    """Invalid argument values, shapes or configuration contents."""


class ConfigError(ValidationError):
    """A configuration that is well formed but cannot be realised."""


class RangeError(ValidationError):
    """A scalar argument outside its admissible interval."""


class AliasingError(ValidationError):
    """A velocity magnitude exceeds the encoding VENC."""


class UnsatisfiableError(ValidationError):
    """A sampling constraint cannot be met."""


class FormatError(Flow4DError):
    """Malformed container or checkpoint file."""


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class NumericError(Flow4DError, ArithmeticError):
    """Non-finite loss or gradient encountered during optimisation."""
