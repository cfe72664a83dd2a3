class FloodcastError(Exception):
    """Base class for all errors raised by floodcast"""


class ValidationError(FloodcastError, ValueError):
    """Input violates a domain rule (units, schema, ranges, geometry)"""


class NonFiniteError(FloodcastError, FloatingPointError):
    """A tensor or value that must be finite is not"""


class TrainingDivergedError(NonFiniteError):
    """
    Training produced a non-finite loss, gradient or parameter.

    Parameters
    ----------
    message: str
        Description of the failure.
    last_finite_state: ModelState or None
        Snapshot of the last state whose parameters were all finite.
    """

    def __init__(self, message: str, last_finite_state=None):
        super().__init__(message)
        self.last_finite_state = last_finite_state


class StageError(FloodcastError, RuntimeError):
    """A pipeline stage failed. Completed upstream stages remain cached."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"Stage '{stage}' failed: {message}")
        self.stage = stage
