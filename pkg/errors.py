"""Exception hierarchy shared by every module.

Library code raises these; only the command-line entry point catches
``MNTPError`` and turns it into an exit code.
"""


class MNTPError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MNTPError):
    """Tensor shapes do not agree."""


class NumericError(MNTPError):
    """A non-finite value appeared; ``step`` / ``position`` locate it when known."""

    def __init__(self, message: str, step=None, position=None):
        super().__init__(message)
        self.step = step
        self.position = position


class GeometryError(MNTPError):
    """Latent-map extents are incompatible with the patch geometry."""


class FormatError(MNTPError):
    """A dataset or checkpoint file could not be parsed."""

    def __init__(self, message: str, offset=None, record=None):
        parts = [message]
        if record is not None:
            parts.append(f"record {record}")
        if offset is not None:
            parts.append(f"byte offset {offset}")
        super().__init__(" at ".join(parts) if len(parts) > 1 else message)
        self.offset = offset
        self.record = record


class RangeError(MNTPError):
    """An index, class or timestep is outside its valid range."""


class ArgumentError(MNTPError):
    """An argument violates an operation's precondition."""


class CapabilityError(MNTPError):
    """The model state does not support the requested operation."""


class ConfigError(MNTPError):
    """A configuration document violates the schema."""
