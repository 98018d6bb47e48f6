from __future__ import annotations


class AffineWalkError(Exception):
    """Base class for every failure the toolkit reports."""

    exit_code: int = 1


class InputError(AffineWalkError):
    exit_code = 2


class NotHyperbolic(AffineWalkError):
    exit_code = 3


class AmbiguousSpectrum(AffineWalkError):
    """A characteristic root sits too close to the unit circle to decide."""

    exit_code = 3


class BudgetExceeded(AffineWalkError):
    exit_code = 4


class NotContractive(AffineWalkError):
    exit_code = 5


class DomainError(AffineWalkError):
    pass


class RankDeficient(AffineWalkError):
    pass


class TooFar(AffineWalkError):
    pass


class NotPseudoOrbit(AffineWalkError):
    pass


class DimensionUnsupported(AffineWalkError):
    pass


class EmptyIntersection(AffineWalkError):
    pass


class DiameterTooLarge(AffineWalkError):
    pass
