"""Exception taxonomy shared across the package.

Each family maps to one CLI exit code (see cli.py).
"""


class PointshellError(Exception):
    """Base class for all package errors."""


class ConfigError(PointshellError):
    """Invalid or inconsistent configuration (unknown key, bad combination)."""


class SizeError(PointshellError, ValueError):
    """A count/shape precondition was violated (k > N, ragged batch, ...)."""


class FormatError(PointshellError):
    """Base for on-disk format problems."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(FormatError):
    """File ended before the declared payload was read."""


class VersionError(FormatError):
    """File declares an unsupported format version."""


class ChecksumError(FormatError):
    """A section checksum did not match its payload."""


class DivergenceError(PointshellError):
    """Training produced a non-finite loss or activation."""
