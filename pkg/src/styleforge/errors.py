"""Exception types shared across the package.

Everything derives from StyleForgeError so callers can catch the package's
failures with one except clause; the concrete classes keep file-format and
input problems distinguishable in tests and CLI error reporting.
"""


class StyleForgeError(Exception):
    """Base class for all styleforge errors."""


class ShapeError(StyleForgeError, ValueError):
    """An input tensor/array has an incompatible shape or size."""


class BadMagicError(StyleForgeError, ValueError):
    """A binary file does not start with the expected magic bytes."""


class VersionMismatchError(StyleForgeError, ValueError):
    """A container file declares an unsupported format version."""


class TruncatedFileError(StyleForgeError, ValueError):
    """A file ends before its declared payload is complete."""


class ChecksumError(StyleForgeError, ValueError):
    """A container file's trailing checksum does not match its contents."""


class InvalidDimensionsError(StyleForgeError, ValueError):
    """A file header declares non-positive or nonsensical dimensions."""


class UnsupportedMaxvalError(StyleForgeError, ValueError):
    """A PPM/PGM file uses a maxval other than 255."""


class MissingTensorError(StyleForgeError, KeyError):
    """A weight container lacks a tensor required by the requested topology."""

    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"missing tensor {self.name!r}"


class ConfigError(StyleForgeError, ValueError):
    """A training config file is malformed; carries the offending line."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DataError(StyleForgeError, ValueError):
    """A training-data file is unusable; the message names the file."""


class DivergenceError(StyleForgeError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""
