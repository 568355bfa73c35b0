"""Exception hierarchy shared by every module."""


class BiasedCoinError(Exception):
    """Base class for all package errors."""


class ParameterError(BiasedCoinError, ValueError):
    """A rule or function parameter lies outside its admissible range."""


class StateError(BiasedCoinError, RuntimeError):
    """An allocation state is impossible for the rule being applied."""


class ConvergenceError(BiasedCoinError, ArithmeticError):
    """A numerical procedure failed to converge or to stabilise."""


class ConfigError(BiasedCoinError, ValueError):
    """A study configuration or rule string cannot be honoured."""
