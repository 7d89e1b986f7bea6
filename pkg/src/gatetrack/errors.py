"""Exception types shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 1,
file problems exit 2, numeric failures (NaN/Inf) exit 3.
"""


class GateTrackError(Exception):
    """Base class for all package errors."""


class ShapeError(GateTrackError, ValueError):
    """Tensor dimensions do not match the operation's contract."""


class ConfigError(GateTrackError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class ParameterError(GateTrackError, ValueError):
    """Invalid numeric parameter (e.g. non-positive temperature)."""


class ParseError(GateTrackError, ValueError):
    """A data file failed to parse; carries file path and line number."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class NumericError(GateTrackError, ArithmeticError):
    """A computation produced NaN or Inf where finite values are required."""
