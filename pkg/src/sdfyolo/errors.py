"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, shapes, or input documents."""


class NumericError(ArithmeticError):
    """A NaN/Inf reached a value that must stay finite (loss, weights)."""
