"""Exception types shared across the codec."""


class B2PError(Exception):
    """Base class for all codec errors."""


class FormatError(B2PError):
    """Malformed input file or bitstream."""


class RangeError(B2PError):
    """A value fell outside its declared range."""


class ConfigError(B2PError):
    """Inconsistent configuration (levels, kernel sizes, channel counts)."""


class ConsistencyError(B2PError):
    """Mismatched tensors/hierarchy levels passed to an operation."""


class DimensionError(B2PError):
    """Shape mismatch between features and parameters."""


class NumericError(B2PError):
    """Non-finite value encountered where finiteness is required."""


class DecodeError(B2PError):
    """Bitstream payload failed to decode (checksum or coder state)."""


class TruncationError(DecodeError):
    """Stream was cut inside a chunk; carries the offending level."""

    def __init__(self, message, level=None):
        super().__init__(message)
        self.level = level


class IncompatibilityError(B2PError):
    """Stream was produced by a different model checkpoint."""
