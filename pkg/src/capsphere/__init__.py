"""Analytical rigid-sphere acoustic transfer functions for own-voice detection."""

__version__ = "0.1.0"

from capsphere.errors import (  # noqa: F401
    CapsphereError,
    ConditioningError,
    DomainError,
    FormatError,
    SingularArgumentError,
    StabilityError,
    TruncationError,
)
