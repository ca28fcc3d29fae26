"""Exception types shared across the package."""


class ATXFError(Exception):
    """Base class for all package errors."""


class ShapeError(ATXFError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(ATXFError, ValueError):
    """A precondition on an input value was violated."""


class ConfigurationError(ATXFError, ValueError):
    """An experiment or transfer configuration is invalid."""


class GeometryError(ConfigurationError):
    """Model geometries disagree (depth, heads, tokens, ...)."""

    def __init__(self, field: str, expected, actual):
        self.field = field
        self.expected = expected
        self.actual = actual
        super().__init__(f"geometry mismatch on {field!r}: expected {expected!r}, got {actual!r}")


class NonFiniteLossError(ATXFError, FloatingPointError):
    """Training produced a NaN or Inf loss."""


class DatasetParseError(ATXFError, ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        self.path = path
        self.offset = offset
        where = ""
        if path is not None:
            where += f" in {path}"
        if offset is not None:
            where += f" at byte offset {offset}"
        super().__init__(message + where)


class CheckpointError(ATXFError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class DigestMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
