class LtvSentinelError(Exception):
    """Base class for every error raised by the package."""


class DimensionError(LtvSentinelError, ValueError):
    pass


class ConfigError(LtvSentinelError, ValueError):
    pass


class UsageError(LtvSentinelError):
    pass


class FactorizationError(LtvSentinelError):
    pass


class NumericalError(LtvSentinelError):
    pass


class InsufficientDataError(LtvSentinelError):
    pass


class NotIdentifiableError(LtvSentinelError):
    pass


class NoCandidateError(LtvSentinelError):
    pass


class StepError(LtvSentinelError):
    """An error tied to a specific step index of a run.

    Args:
        message (str): Human-readable diagnostic.
        step (int): The step index at which the error occurred.
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.message = message
        self.step = step


class InfeasibleError(StepError):
    pass


class DivergenceError(StepError):
    pass
