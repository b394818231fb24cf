"""Exception types shared across the package."""


class MidrepError(Exception):
    """Base class for all package errors."""


class ShapeError(MidrepError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ArgumentError(MidrepError, ValueError):
    """An argument is outside its valid domain."""


class GeometryError(MidrepError, ValueError):
    """Input geometry is incompatible with the requested network outputs."""


class ValidationError(MidrepError, ValueError):
    """A network stack or weight store fails validation."""


class StateError(MidrepError, RuntimeError):
    """An operation was called without its required prior state."""


class DataError(MidrepError, ValueError):
    """Input data is missing or malformed."""


class DegenerateDataError(DataError):
    """Training data does not contain enough classes."""


class ProtocolError(MidrepError, ValueError):
    """An evaluation protocol rule was violated (e.g. overlapping splits)."""


class FixtureError(MidrepError, ValueError):
    """A comparison fixture does not match the report it is compared with."""


class FormatError(MidrepError, ValueError):
    """A binary file is malformed. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ParseError(MidrepError, ValueError):
    """A text file is malformed. ``line`` is 1-based."""

    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line
