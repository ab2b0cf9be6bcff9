"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractViolation(ValueError):
    """A precondition of an operation does not hold."""


class ConfigError(ValueError):
    """Invalid configuration value."""
