"""Exception types shared across the package."""


class DeltaLearnError(Exception):
    """Base class for all library errors."""


class ShapeError(DeltaLearnError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(DeltaLearnError):
    """A configuration value or combination is illegal."""


class ContractError(DeltaLearnError):
    """An API precondition was violated (missing snapshot, non-scalar loss, ...)."""


class FormatError(DeltaLearnError):
    """A binary container failed to parse.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(DeltaLearnError):
    """Data failed a consistency check (label/class mismatch, hash mismatch, ...)."""


class TrainingDiverged(DeltaLearnError):
    """Loss became non-finite; carries a diagnostic state dump."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = dict(state or {})
