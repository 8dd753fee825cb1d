"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, data/structure
errors -> 2, numerical failures -> 3.
"""


class WemoeError(Exception):
    """Base class for all package errors."""


class ShapeError(WemoeError):
    """Operands have incompatible shapes."""


class ContractError(WemoeError):
    """A documented precondition was violated."""


class StructureError(WemoeError):
    """Two parameter trees disagree in keys or tensor shapes."""


class NumericalError(WemoeError):
    """An operation produced non-finite values from finite inputs."""


class ConfigError(WemoeError):
    """A config file or flag value could not be parsed."""


class CheckpointError(WemoeError):
    """Base class for checkpoint I/O failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """File declares a format version this reader does not understand."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared payload was read."""


class CheckpointFormatError(CheckpointError):
    """Structurally invalid field (dtype code, bounds, manifest)."""
