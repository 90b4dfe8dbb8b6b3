"""Exception types shared across the package.

Argument errors use the builtin ValueError; I/O problems use OSError.
Everything with a dedicated CLI exit code gets its own class here.
"""


class CubeFormatError(ValueError):
    """Cube file has a bad magic, version, or header/payload mismatch."""


class CubeDataError(ValueError):
    """Cube payload contains non-finite or badly out-of-range values."""


class CalibrationError(RuntimeError):
    """Noise calibration could not identify the parameters."""


class DegenerateDistributionError(ValueError):
    """A histogram collapsed (e.g. every value outside the binning range)."""


class ConfigError(ValueError):
    """Run configuration is malformed (unknown keys, bad types, missing paths)."""


class StateError(RuntimeError):
    """A required prior artifact (e.g. an earlier-stage checkpoint) is missing."""


class NumericError(RuntimeError):
    """Training hit a non-finite loss; carries step diagnostics in the message."""
