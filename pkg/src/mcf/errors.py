"""Exception hierarchy. ConfigError maps to CLI exit code 2, DataError to 3."""


class McfError(Exception):
    """Base class for all library errors."""


class ConfigError(McfError):
    """Invalid configuration: bad parameter combination, missing weights, etc."""


class DataError(McfError):
    """Invalid input data: malformed file, bad annotation row, non-finite pixel."""


class InvalidInputError(DataError):
    """An input value violates an operation's preconditions (e.g. zero-area box)."""


class WeightsFormatError(DataError):
    """Backbone weights file failed magic/version/shape validation."""


class ModelFormatError(DataError):
    """Cascade model file failed validation."""


class IngestError(DataError):
    """Precomputed channel file does not match the expected geometry."""


class SequencingError(McfError):
    """A feature was evaluated on a layer that has not been populated yet.

    This signals a bug in detector staging, not bad user input.
    """
