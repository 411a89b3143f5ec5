"""Exception types raised by the solvers and validators."""


class JumpFBSDEError(Exception):
    pass


class ValidationError(JumpFBSDEError):
    """A problem definition or run configuration is malformed."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class NonFiniteCoefficient(JumpFBSDEError):
    pass


class NonFiniteValue(JumpFBSDEError):
    pass


class NonFiniteState(JumpFBSDEError):
    pass


class NonFiniteCost(JumpFBSDEError):
    pass


class SingularRegression(JumpFBSDEError):
    pass


class ResourceLimit(JumpFBSDEError):
    pass


class PicardDiverged(JumpFBSDEError):
    """Fixed-point iteration between forward and backward sweeps failed.

    ``residuals`` holds the full residual history so callers can report it.
    """

    def __init__(self, message, residuals=(), changes=()):
        self.residuals = list(residuals)
        self.changes = list(changes)
        super().__init__(message)
