"""Exception hierarchy shared by the pipeline stages.

Each class carries the CLI exit code it maps to, so the command layer can
translate failures without inspecting messages.
"""


class RoomVolError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ParameterError(RoomVolError, ValueError):
    """An argument violates an operation's precondition."""

    exit_code = 1


class ConfigurationError(RoomVolError):
    """Inputs are individually valid but cannot satisfy the requested setup."""

    exit_code = 2


class AssetError(RoomVolError, OSError):
    """A referenced file is missing, unreadable or unwritable."""

    exit_code = 2


class EstimationError(RoomVolError):
    """A measurement (e.g. an RT60 fit) could not be performed on the data."""

    exit_code = 1


class NumericalError(RoomVolError, FloatingPointError):
    """A non-finite value appeared during a computation."""

    exit_code = 1


class ContractError(RoomVolError, RuntimeError):
    """An object was used outside its lifecycle (e.g. a stale forward cache)."""

    exit_code = 1


class CheckpointError(RoomVolError):
    """A checkpoint or pretrained-import file is malformed or version-mismatched."""

    exit_code = 3


class DataFormatError(RoomVolError):
    """A feature file or CSV does not follow its declared layout."""

    exit_code = 4
