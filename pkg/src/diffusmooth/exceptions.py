"""Exception hierarchy for diffusmooth."""


class DiffusmoothError(Exception):
    """Base class for all library errors."""


class SimulationDivergedError(DiffusmoothError):
    """A simulated path produced a non-finite value."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"simulation diverged at step {step}")


class UnsupportedOrderError(DiffusmoothError):
    """Requested a moment order outside the implemented range."""


class NearSingularMeanError(DiffusmoothError):
    """Inverse-moment approximation requested at a mean too close to zero."""


class ClosureUnsupportedError(DiffusmoothError):
    """Moment closure is not available for the given model."""


class TailUnderflowError(DiffusmoothError):
    """Mixture density degenerated beyond float range at the evaluation point."""


class DomainTooSmallError(DiffusmoothError):
    """Probability mass leaked or fell outside the spatial grid."""


class SchemeInstabilityError(DiffusmoothError):
    """The finite-difference scheme produced unacceptable negative density."""


class ResolutionError(DiffusmoothError):
    """Spatial grid too coarse to resolve the density."""


class DegenerateProductError(DiffusmoothError):
    """Pointwise product of filter and backward function has vanishing mass."""


class LogDomainError(DiffusmoothError):
    """Logarithm requested of a non-positive grid value."""


class DegenerateControlError(DiffusmoothError):
    """Control selection has a degenerate (non-finite) quadratic form."""


class TrajectoryDegenerateError(DiffusmoothError):
    """State variance hit the floor during a boundary-value solve."""


class UnidentifiableParameterError(DiffusmoothError):
    """Parameter update has vanishing curvature."""


class UnreliableEstimateError(DiffusmoothError):
    """Monte-Carlo estimate excluded too many divergent paths."""


class SupportMismatchError(DiffusmoothError):
    """Divergence undefined: reference density underflows where mass is present."""


class ConfigError(DiffusmoothError):
    """Experiment configuration is invalid."""
