"""Exception types shared across the library."""


class FracpeakError(Exception):
    """Base class for all library errors."""


class TailTooLarge(FracpeakError):
    """Field does not decay enough at the padding edge to apply the free-space operator."""


class SingularSystem(FracpeakError):
    """A linear system that should be SPD failed to factorize (assembly bug)."""


class NoConvergence(FracpeakError):
    """An iterative solve stalled; carries the iteration trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class BudgetExceeded(FracpeakError):
    """Requested grid exceeds the configured memory budget."""


class PositivityLost(FracpeakError):
    """Ground-state iterate dipped negative beyond tolerance after all restarts."""


class OutOfRange(FracpeakError):
    """Radial evaluation beyond the configured tail-law validity range."""


class NegativePi(FracpeakError):
    """Derived boundary term came out negative beyond tolerance (discretization inconsistency)."""


class SingularBordered(FracpeakError):
    """Bordered (saddle) system is numerically singular; peaks too close or grid too coarse."""


class ContractionFailed(FracpeakError):
    """Fixed-point iterates stopped decreasing; epsilon too large for the asymptotic regime."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []


class StepBelowGrid(FracpeakError):
    """Finite-difference step in exact mode smaller than the grid spacing."""


class HitBoundary(FracpeakError):
    """Configuration search terminated on the boundary of the admissible set."""


class NewtonDiverged(FracpeakError):
    """Newton polish on the unprojected equation failed to converge."""


class ConfigInvalid(FracpeakError):
    """Run configuration violates a constraint; message names the field."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
