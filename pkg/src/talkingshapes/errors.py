"""Exception types shared across the package."""


class TalkingShapesError(Exception):
    """Base class for all package errors."""


class ValidationError(TalkingShapesError):
    """Malformed argument, shape, or file; maps to CLI exit code 1."""


class NumericError(TalkingShapesError):
    """Non-finite values or numeric breakdown at runtime; maps to CLI exit code 2."""


class InjectionError(TalkingShapesError):
    """Attention injection failed: missing source record or shape mismatch."""
