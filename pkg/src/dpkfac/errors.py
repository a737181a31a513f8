"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition (shape, range, symmetry...)."""


class ConvergenceError(RuntimeError):
    """An iterative routine failed to reach its tolerance within its budget."""


class SingularFactorError(ArithmeticError):
    """A damped spectrum is not strictly positive, so the inverse root is undefined."""


class CalibrationRangeError(ValueError):
    """Noise calibration cannot bracket the target within the allowed sigma range."""


class IdxFormatError(ValueError):
    """Malformed IDX file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
