"""Exception hierarchy shared by the package.

Each class maps to one CLI exit code (see ``semistereo.cli``).
"""


class SemiStereoError(Exception):
    """Base class for all package errors."""


class ShapeError(SemiStereoError, ValueError):
    pass


class StateError(SemiStereoError, RuntimeError):
    pass


class ConfigError(SemiStereoError, ValueError):
    pass


class TrainingError(SemiStereoError, ArithmeticError):
    """Non-finite values encountered during optimization."""


class MatcherError(SemiStereoError, ValueError):
    pass


class ContractError(SemiStereoError, ValueError):
    """A caller-supplied object violates a documented precondition."""


class DataError(SemiStereoError, OSError):
    pass


class FormatError(DataError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class RectificationError(DataError):
    pass


class SamplingError(DataError):
    pass
