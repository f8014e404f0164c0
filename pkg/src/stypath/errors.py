"""Exception types shared across the package."""


class StypathError(Exception):
    """Base class; the CLI maps it to exit code 2."""


class ValidationError(StypathError, ValueError):
    pass


class ShapeError(ValidationError):
    pass


class ConfigurationError(StypathError, ValueError):
    pass


class IntegrityError(StypathError):
    """A run directory's stored artifacts or config no longer match their hashes."""


class StageFailure(StypathError):
    """A pipeline stage failed; the run directory holds a resumable checkpoint."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class SynthesisDiverged(StypathError, ArithmeticError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration
        self.value = value
