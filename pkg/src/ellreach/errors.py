"""Exception hierarchy shared by all ellreach modules."""


class EllReachError(Exception):
    """Base class for every error raised by the package."""


class DimensionMismatch(EllReachError, ValueError):
    pass


class NotSymmetric(EllReachError, ValueError):
    pass


class NoConvergence(EllReachError, RuntimeError):
    pass


class NotPsd(EllReachError, ValueError):
    pass


class NotUnitNorm(EllReachError, ValueError):
    pass


class EmptyFamily(EllReachError, ValueError):
    pass


class OutOfRange(EllReachError, ValueError):
    pass


class NonPositive(EllReachError, ValueError):
    pass


class NotOrthogonal(EllReachError, ValueError):
    pass


class NonPositiveKappa(EllReachError, ValueError):
    pass


class StepTooLarge(EllReachError, ValueError):
    pass


class ShapeDegenerate(EllReachError, ArithmeticError):
    """A shape matrix lost positive definiteness during integration.

    Attributes:
        t: time at which the degeneracy was detected.
        member: index of the offending family member.
    """

    def __init__(self, t, member, detail=""):
        self.t = float(t)
        self.member = int(member)
        msg = f"shape matrix of member {member} degenerate at t={t:.6g}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DimensionUnsupported(EllReachError, ValueError):
    pass


class DegeneratePolygon(EllReachError, ValueError):
    pass


class CflViolation(EllReachError, ValueError):
    pass


class TimeNotStored(EllReachError, KeyError):
    pass


class ParseError(EllReachError, ValueError):
    pass


class ValidationError(EllReachError, ValueError):
    pass


class IoError(EllReachError, OSError):
    pass


class BoxTooSmall(UserWarning):
    """Warning: the zero level set of a grid solution reaches the box edge."""
