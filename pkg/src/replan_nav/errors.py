"""Exception types raised across the package."""


class ReplanNavError(Exception):
    """Base class for all package errors."""


class ScenarioInfeasible(ReplanNavError):
    pass


class NoPath(ReplanNavError):
    pass


class InitialPlanFailed(ReplanNavError):
    pass


class StepAfterDone(ReplanNavError):
    pass


class BufferUnderfull(ReplanNavError):
    pass


class ModelFormatError(ReplanNavError):
    pass


class TraceMismatch(ReplanNavError):
    pass


class ConfigError(ReplanNavError):
    pass
