"""Exception hierarchy shared across the toolkit."""


class CVADError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CVADError, ValueError):
    pass


class DegenerateBatchError(CVADError, ValueError):
    pass


class OptimizerError(CVADError, FloatingPointError):
    def __init__(self, name, message=None):
        self.name = name
        super().__init__(message or f"non-finite gradient for parameter {name!r}")


class ConfigError(CVADError, ValueError):
    pass


class ArchitectureError(ConfigError):
    pass


class DatasetError(CVADError):
    pass


class DivergenceError(CVADError, FloatingPointError):
    pass


class CheckpointError(CVADError):
    pass


class StateError(CVADError, RuntimeError):
    pass


class MetricError(CVADError, ValueError):
    pass
