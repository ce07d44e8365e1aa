"""Exception types raised by the solvers and diagnostics."""


class ReflectaError(Exception):
    """Base class for all package errors."""


class ConfigError(ReflectaError):
    """Problem file or run configuration is malformed."""


class HardViolation(ReflectaError):
    """A structural hypothesis failed that invalidates every downstream
    computation (non-elliptic coefficient field or unordered barriers)."""


class NonEllipticAtNode(ReflectaError):
    """A face coefficient of the divergence-form operator is <= 0."""


class InvalidSample(ReflectaError):
    """A projected function produced a NaN or infinity at a grid node."""


class NewtonDivergence(ReflectaError):
    """Damped (semismooth) Newton failed to reduce the slice residual."""

    def __init__(self, msg, slice_index=None, node_index=None, residual=None):
        super().__init__(msg)
        self.slice_index = slice_index
        self.node_index = node_index
        self.residual = residual


class PenaltyOverflow(ReflectaError):
    """n * (barrier violation) exceeded the overflow guard."""


class StalledIteration(ReflectaError):
    """Complementarity iteration stopped making progress."""


class EnvelopeViolation(ReflectaError):
    """A dominating supersolution dipped below the obstacle solution."""

    def __init__(self, msg, slice_index=None, node_index=None):
        super().__init__(msg)
        self.slice_index = slice_index
        self.node_index = node_index


class DominanceNotSatisfied(ReflectaError):
    """comparison_trial was handed a pair whose data are not ordered."""


class GridMismatch(ReflectaError):
    """Grid functions from incompatible grids were combined."""


class NonC1Coefficients(ReflectaError):
    """Path simulation needs C1 coefficients for the drift."""


class StabilityViolation(ReflectaError):
    """Explicit dynamic program exceeded its sub-stepping budget."""


class InfiniteBarrierUnderMeasure(ReflectaError):
    """A reaction measure part charges a node where its barrier is absent."""


class DegenerateFit(ReflectaError):
    """Rate fit was attempted on gaps that are all numerically zero."""
