"""Exception hierarchy.

Every error maps onto one of the CLI exit codes: usage/config problems (2),
IO and file-format problems (3) and numerical failures (4).
"""


class DynvaeError(Exception):
    exit_code = 1


class UsageError(DynvaeError, ValueError):
    exit_code = 2


class ShapeError(UsageError):
    """Operand shapes do not agree."""


class InsufficientDataError(UsageError):
    pass


class FormatError(DynvaeError):
    """Malformed or truncated file. ``offset`` is the byte position of the problem."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedFormatError(FormatError):
    pass


class EmptySequenceError(FormatError):
    pass


class NumericError(DynvaeError, ArithmeticError):
    exit_code = 4


class NotPSDError(NumericError):
    pass


class DegenerateDynamicsError(NumericError):
    pass


class InfeasibleCovarianceError(NumericError):
    pass


class TrainingDivergedError(NumericError):
    def __init__(self, epoch, message=None):
        super().__init__(message or f"training diverged (non-finite loss) in epoch {epoch}")
        self.epoch = epoch
