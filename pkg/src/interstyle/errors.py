"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration: bad shapes, unknown keys, impossible requests."""


class NumericalError(RuntimeError):
    """Training produced a non-finite value and was aborted."""
