"""Exception and warning types shared across the package."""


class UsjeError(Exception):
    """Base class for all package errors."""


class LPError(UsjeError):
    """Base class for linear-programming failures."""


class Infeasible(LPError):
    """The LP has no feasible point."""


class Unbounded(LPError):
    """The LP objective is unbounded below."""


class CycleDetected(LPError):
    """The simplex exhausted its pivot budget (cycling or stalling)."""


class NumericalFailure(UsjeError):
    """A numerical routine lost accuracy beyond recovery."""


class InvalidSpec(UsjeError):
    """A basis or config specification is malformed."""


class DuplicateTerm(InvalidSpec):
    """A custom basis contains the same monomial twice."""


class DimensionMismatch(UsjeError):
    """Array arguments disagree in shape."""


class MarketClearingViolation(UsjeError):
    """Portfolio choices do not sum to the asset's net supply."""


class NonpositiveConsumption(UsjeError):
    """A converged candidate has consumption at the evaluation floor."""


class NoConvergence(UsjeError):
    """The equilibrium solver failed to reach the residual tolerance."""

    def __init__(self, message, residual_norm=None, state=None, date=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.state = state
        self.date = date


class MaxIterationsExceeded(UsjeError):
    """Time iteration hit its sweep cap before the policy settled."""


class MaxOuterIterations(UsjeError):
    """The exchange loop hit its outer-iteration cap."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class InsufficientPoints(UsjeError):
    """Fewer usable sample points than the fitting problem requires."""


class DegenerateBasis(UserWarning):
    """The feature matrix restricted to extreme points has rank zero."""
