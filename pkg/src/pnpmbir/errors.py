"""Exception hierarchy shared by all pnpmbir modules."""


class PnpMbirError(Exception):
    """Base class for all package errors."""


class DimensionError(PnpMbirError):
    """Array shape does not match the scan geometry or a peer array."""


class UsageError(PnpMbirError):
    """Invalid argument value (unknown enum, degenerate window, bad seed pair)."""


class InputError(PnpMbirError):
    """Input data violates a precondition (non-finite values, negative mass)."""


class FormatError(PnpMbirError):
    """A serialized container is malformed.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SolverError(PnpMbirError):
    """Iterative solver failed to converge; carries the final relative residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final relative residual {residual:.3e})")
        self.residual = residual


class ConfigError(PnpMbirError):
    """Pipeline configuration file is invalid or inconsistent."""
