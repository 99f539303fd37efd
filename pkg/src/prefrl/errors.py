"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A run, agent or hyperparameter configuration is invalid."""


class NumericalError(ArithmeticError):
    """A numerical routine produced a non-finite or ill-conditioned result."""


class ModelMisspecificationError(RuntimeError):
    """Observed data has zero likelihood under every model in a finite posterior."""
