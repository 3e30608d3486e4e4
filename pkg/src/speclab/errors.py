"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument is outside the function's documented domain."""


class ConfigError(ValueError):
    """A config file or run configuration is malformed or inconsistent."""


class TrainingError(RuntimeError):
    """A training loop failed to reach its convergence target."""


class NumericError(ArithmeticError):
    """A numeric quantity that must be finite is not."""


class VerificationError(RuntimeError):
    """The draft-verify engine hit an internally impossible state."""
