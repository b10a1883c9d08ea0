"""Exception types shared across the package."""


class AptError(Exception):
    """Base class; ``code`` is the machine-readable tag the CLI reports."""

    code = "apt_error"


class RangeError(AptError, ValueError):
    code = "invalid_range"


class ShapeError(AptError, ValueError):
    code = "shape_mismatch"


class NonFiniteError(AptError, ValueError):
    code = "non_finite"


class TokenError(AptError, KeyError):
    code = "unknown_token"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class PlaceholderError(AptError, ValueError):
    code = "missing_placeholder"


class DuplicateIdentifierError(AptError, ValueError):
    code = "duplicate_identifier"


class TapMismatchError(AptError, ValueError):
    code = "tap_mismatch"


class ConfigMismatchError(AptError, ValueError):
    code = "config_mismatch"


class CheckpointError(AptError, OSError):
    code = "checkpoint_error"


class EmptyInputError(AptError, ValueError):
    code = "empty_input"


class LogParseError(AptError, ValueError):
    code = "parse_error"


class NonFiniteLossError(AptError, FloatingPointError):
    """Training produced a NaN/inf loss; ``dump`` holds the diagnostic snapshot."""

    code = "non_finite_loss"

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
