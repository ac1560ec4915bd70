"""Exception types raised by the simulator."""


class WeakMeasError(Exception):
    """Base class for all package errors."""


class DomainError(WeakMeasError, ValueError):
    """An argument lies outside the domain of the operation."""


class DegenerateInputError(WeakMeasError, ValueError):
    """The input matrix carries no usable information (e.g. it is zero)."""


class ImpossibleOutcomeError(WeakMeasError, ArithmeticError):
    """A sampled outcome has vanishing probability under the current state."""


class UnsupportedConfigurationError(WeakMeasError, ValueError):
    """The requested parameter combination is not implemented."""


class ConfigError(WeakMeasError, ValueError):
    """A configuration file could not be parsed or validated."""
