"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or unexpected dimensions."""


class ContractError(ValueError):
    """An input violates a documented precondition (e.g. asymmetry)."""


class NumericError(RuntimeError):
    """A numeric routine could not produce a trustworthy result.

    Carries the offending condition number or residual when one is
    available, so callers can log something actionable.
    """

    def __init__(self, message: str, condition: float | None = None):
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)
        self.condition = condition


class ValidationError(ValueError):
    """A plant or weight vector fails structural validation."""


class ConfigError(ValueError):
    """A run configuration is malformed or incomplete."""


class StartupError(RuntimeError):
    """Swarm initialization exhausted its resampling budget."""
