class GifstreamError(Exception):
    """Base class for all library errors."""


class ConfigError(GifstreamError, ValueError):
    pass


class DimensionError(GifstreamError, ValueError):
    pass


class FormatError(GifstreamError, ValueError):
    """Malformed or truncated serialized data."""


class DecodeError(FormatError):
    """Coded payload failed its integrity checks."""
