"""Exception hierarchy. Each family maps onto a CLI exit code."""


class AsitError(Exception):
    exit_code = 1


class ConfigError(AsitError, ValueError):
    """Invalid, unknown, or mistyped configuration value."""

    exit_code = 2


class DataError(AsitError):
    exit_code = 3


class DecodeError(DataError):
    """Audio or container bytes could not be parsed."""


class EmptyInputError(DataError):
    pass


class TooShortError(DataError):
    pass


class DegenerateSplitError(DataError):
    """A class present in the test split never appears in the training split."""


class CheckpointError(DataError):
    """Checkpoint missing, damaged, or incompatible with the requested config."""


class NumericFault(AsitError, FloatingPointError):
    """Non-finite values appeared in activations or losses.

    ``context`` carries whatever diagnostics the raiser had at hand
    (block index, step, batch ids, loss parts).
    """

    exit_code = 4

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context
