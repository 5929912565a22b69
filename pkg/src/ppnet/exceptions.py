"""Exception types raised across the package."""


class PPNetError(Exception):
    """Base class for all errors raised by ppnet."""


class DimensionError(PPNetError, ValueError):
    """Tensor shapes do not satisfy an operation's requirements."""


class NumericFault(PPNetError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(PPNetError, ValueError):
    """A precondition of an operation was violated."""


class PNMParseError(PPNetError, ValueError):
    """Malformed PNM file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class IngestionError(PPNetError, ValueError):
    """One or more frame files could not be ingested."""

    def __init__(self, message, offenders=()):
        self.offenders = list(offenders)
        if self.offenders:
            message = message + ": " + ", ".join(str(o) for o in self.offenders)
        super().__init__(message)


class ConfigError(PPNetError, ValueError):
    """Invalid or incomplete configuration."""


class CheckpointError(PPNetError, ValueError):
    """Checkpoint file is malformed or does not match the running config."""


class DivergenceError(PPNetError, RuntimeError):
    """Training produced a non-finite loss or gradient.

    ``checkpoint`` holds the last good state when one exists.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
