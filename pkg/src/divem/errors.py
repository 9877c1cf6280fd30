"""Exception types shared across the package."""


class DivemError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(DivemError, ValueError):
    """A parameter vector lies outside the domain of its family."""


class InvalidModelError(DivemError, ValueError):
    """A model violates a structural invariant (e.g. a singular usage system)."""


class NumericalError(DivemError, ArithmeticError):
    """A computation produced a non-finite or degenerate intermediate."""


class ConfigError(DivemError, ValueError):
    """An experiment configuration is malformed or incomplete."""


class ParseError(DivemError, ValueError):
    """A data file could not be parsed."""
