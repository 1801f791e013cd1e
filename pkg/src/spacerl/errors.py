"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or environment parameters."""


class UsageError(ValueError):
    """An operation was called with inputs that break its contract."""


class NumericalError(ArithmeticError):
    """Non-finite values or a breakdown inside a numerical routine."""


class InfeasibleConstraintError(NumericalError):
    """A linear constraint is violated but its normal vanishes, so no projection exists."""


class InfeasibleProblem(NumericalError):
    """Certificate that a small QP has no feasible point."""

    def __init__(self, message, min_violation):
        super().__init__(message)
        self.min_violation = min_violation
