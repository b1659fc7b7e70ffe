"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when array shapes are incompatible for an operation."""


class DomainError(ValueError):
    """Raised when an argument is outside its documented domain."""


class ContractError(RuntimeError):
    """Raised when an API is used in a way its contract forbids."""


class TrainingFloorError(RuntimeError):
    """Raised when a training run fails to reach its required quality floor."""


class StageDependencyError(RuntimeError):
    """Raised when a pipeline stage runs before the stages it depends on."""
