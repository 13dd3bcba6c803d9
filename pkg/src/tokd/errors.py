"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes, so new errors should subclass one of
the categories below rather than ``TokdError`` directly.
"""


class TokdError(Exception):
    """Base class for all package errors."""


class ConfigError(TokdError, ValueError):
    """Invalid parameter, hyperparameter or architecture choice."""


class ShapeError(ConfigError):
    """Tensor shapes do not agree."""


class DataError(TokdError, ValueError):
    """Malformed, empty or inconsistent dataset / labels / files."""


class StateError(TokdError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class RegistryError(TokdError, KeyError):
    """A named parameter or gradient is missing from a registry."""


class NumericError(TokdError, ArithmeticError):
    """A numerically undefined quantity was requested (zero norm, singular system)."""
