"""Exception types raised across the package."""


class M2GANError(Exception):
    pass


class ConfigurationError(M2GANError, ValueError):
    """Inconsistent or invalid configuration (channel counts, rates, weights)."""


class PreconditionError(M2GANError, ValueError):
    """An input violated an operation's precondition (shape, size, range)."""


class NumericError(M2GANError, FloatingPointError):
    """Non-finite values appeared during a forward pass or loss evaluation."""


class StateError(M2GANError, RuntimeError):
    """Recurrent or optimizer state is inconsistent with the current parameters."""


class IngestionError(M2GANError, ValueError):
    """External files (label maps, images) could not be ingested."""


class ValidationError(M2GANError, ValueError):
    """Dataset or directory layout failed validation.

    ``missing`` holds the offending ids so callers can report them.
    """

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class CheckpointVersionError(M2GANError, RuntimeError):
    pass
