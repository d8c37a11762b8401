from typing import Optional


class SCLError(Exception):
    """Base class for every error raised by the training engine."""


class ConfigError(SCLError, ValueError):
    """A configuration file or flag combination is invalid."""


class DimensionError(SCLError, ValueError):
    """Tensor shapes do not line up for the requested operation."""


class ContractError(SCLError, ValueError):
    """A precondition of an operation was violated by the caller."""


class CapacityError(SCLError, ValueError):
    """The generator cannot produce the requested number of distinct class codes."""


class NumericalError(SCLError, ArithmeticError):
    """An operation produced NaN or Inf."""


class FormatError(SCLError):
    """A dataset or checkpoint file is malformed.

    `offset` is the byte position at which the problem was detected.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class TrainingAborted(SCLError):
    """Training hit a non-finite loss.

    Carries the failing iteration and the last finite log row, if any.
    """

    def __init__(self, iteration: int, last_row: Optional[object], reason: str = ""):
        message = f"Training aborted at iteration {iteration}"
        if reason:
            message += f": {reason}"
        if last_row is not None:
            message += f" (last finite row: {last_row})"
        super().__init__(message)
        self.iteration = iteration
        self.last_row = last_row
