"""Exception hierarchy shared across the package."""


class BenignLeakyError(Exception):
    """Base class for all package errors."""


class ConfigurationError(BenignLeakyError, ValueError):
    """Invalid MixtureSpec or configuration value."""


class ContractViolation(BenignLeakyError, ValueError):
    """An operation was called with inputs breaking its preconditions."""


class NumericalFailure(BenignLeakyError, ArithmeticError):
    """Non-finite values appeared during an iterative computation."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DegenerateDataError(BenignLeakyError, ValueError):
    """Gram matrix is singular or numerically so."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class SeparabilityError(BenignLeakyError, ValueError):
    """Data is not linearly separable in the transformed space."""


class SolverFailure(BenignLeakyError, RuntimeError):
    """An iterative solver did not reach its stopping tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class BridgeInapplicable(BenignLeakyError, ValueError):
    """The hypothesis linking the tilde events to event E is violated."""


class ScaleGuardError(ConfigurationError):
    """Problem size exceeds the desk-scale guardrails."""
