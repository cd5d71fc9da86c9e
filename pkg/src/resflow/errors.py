"""Exception types raised across the package."""


class ResflowError(Exception):
    """Base class for all package errors."""


class ParseError(ResflowError):
    pass


class DegenerateInput(ResflowError):
    pass


class EmptyCloud(ResflowError):
    pass


class IoError(ResflowError, OSError):
    pass


class InvalidConfig(ResflowError, ValueError):
    pass


class NonFiniteState(ResflowError, FloatingPointError):
    pass


class NonFiniteGradient(ResflowError, FloatingPointError):
    pass


class NumericalUnderflow(ResflowError, FloatingPointError):
    pass


class Divergence(ResflowError):
    pass


class MissingCorrespondence(ResflowError):
    pass
