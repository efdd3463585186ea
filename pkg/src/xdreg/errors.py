"""Exception types shared across the package."""


class XdregError(Exception):
    """Base class for all package errors."""


class ShapeError(XdregError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class DomainError(XdregError, ValueError):
    """A numeric argument is outside the operation's valid domain."""


class DegenerateInputError(DomainError):
    """Input is degenerate (e.g. a constant vector cannot be z-score aligned)."""


class ConfigError(XdregError, ValueError):
    """A configuration value or combination is invalid."""


class FormatError(XdregError, ValueError):
    """A file violates its declared format.

    ``offset`` carries the byte offset for binary formats, ``line`` the
    1-based line number for text formats; either may be None.
    """

    def __init__(self, message, *, offset=None, line=None):
        if offset is not None:
            message = f"{message} (offset {offset})"
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class IncompatibleCheckpointError(FormatError):
    """Checkpoint file has a wrong magic or an unsupported version."""


class ContractError(XdregError, RuntimeError):
    """A backward pass received a cache that does not match its forward."""


class TrainingDiverged(XdregError, RuntimeError):
    """Training produced a non-finite loss; carries diagnostics."""

    def __init__(self, epoch, batch, loss, param_norms):
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}; "
            f"parameter norms: {param_norms}"
        )
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        self.param_norms = param_norms
