"""Exception types shared across the package."""


class TVGError(Exception):
    """Base class for all library errors."""


class DegenerateConfigurationError(TVGError, ValueError):
    """Camera configuration cannot support the requested construction."""


class DegenerateTransferError(TVGError, ValueError):
    """Point transfer is undefined (query at or near an epipole)."""


class AlignmentDegenerateError(TVGError, ValueError):
    """Point sets are too few or too degenerate for a closed-form alignment."""


class InsufficientEvidenceError(TVGError, ValueError):
    """Fewer valid samples than an estimator requires."""


class MatchFileError(TVGError, ValueError):
    """Malformed match file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(TVGError, ValueError):
    """Invalid or unknown configuration entry."""


class TrackingFailure(TVGError, RuntimeError):
    """No usable constraint was available to estimate a frame pose."""
