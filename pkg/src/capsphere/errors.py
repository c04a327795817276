"""Exception types raised across the package."""


class CapsphereError(Exception):
    """Base class for runtime errors surfaced by the CLI with exit code 2."""


class DomainError(CapsphereError, ValueError):
    pass


class SingularArgumentError(DomainError):
    pass


class StabilityError(CapsphereError, ArithmeticError):
    pass


class TruncationError(CapsphereError, ArithmeticError):
    pass


class ConditioningError(CapsphereError, ArithmeticError):
    pass


class FormatError(CapsphereError, ValueError):
    pass
