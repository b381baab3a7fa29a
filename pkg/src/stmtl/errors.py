"""Exception taxonomy shared across the package.

Every error a caller can act on has its own class; the CLI maps them to
stable exit codes (see cli.EXIT_CODES).
"""


class StmtlError(Exception):
    """Base class for all package errors."""


class DimensionError(StmtlError):
    """Tensor shapes are incompatible for the requested operation."""


class BoundsError(StmtlError):
    """A slice or index is outside the valid range."""


class NumericError(StmtlError):
    """Non-finite values where finite ones are required (NaN watchdogs)."""


class ContractError(StmtlError):
    """An API was used outside its stated contract."""


class ConfigError(StmtlError):
    """A configuration value is missing or inconsistent."""


class DataError(StmtlError):
    """Runtime data violates a declared precondition (e.g. bad class id)."""


class ParseError(StmtlError):
    """A file could not be parsed; carries the path and byte offset."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path} @ byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


class GenerationError(StmtlError):
    """The synthetic-scene generator could not satisfy its constraints."""


class CheckpointMismatch(StmtlError):
    """A checkpoint does not match the model built from its config."""
