"""Exception hierarchy shared by all modules."""


class CGMError(Exception):
    """Base class for every error raised by this package."""


class ModelError(CGMError, ValueError):
    pass


class CycleDetected(ModelError):
    pass


class Disconnected(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class InvalidAssignment(ModelError):
    pass


class NumericalOverflow(CGMError, ArithmeticError):
    pass


class UnsupportedCount(CGMError, ValueError):
    """Count vector violates the hard consistency constraints."""


class ZeroMarginal(CGMError, ValueError):
    pass


class TooLarge(CGMError, RuntimeError):
    """Exhaustive computation would exceed the feasibility guard."""


class DegenerateMarginal(CGMError, ValueError):
    pass


class SingularBlock(CGMError, ArithmeticError):
    def __init__(self, message, edge=None):
        super().__init__(message)
        self.edge = edge


class DomainError(CGMError, ValueError):
    pass


class NonFinite(CGMError, ValueError):
    pass


class FormatError(CGMError, ValueError):
    """Malformed input file; message carries line/field context."""
