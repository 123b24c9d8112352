"""Exception hierarchy shared by all engines."""


class BayesInvError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(BayesInvError, ValueError):
    """Array shapes are inconsistent with the operator or model."""


class InvalidDistributionError(BayesInvError, ValueError):
    """Gaussian parameters violate symmetry or positive definiteness."""


class InvalidModelError(BayesInvError, ValueError):
    """A linear-Gaussian model has a degenerate covariance or bad variances."""


class CapacityError(BayesInvError):
    """An operator is too large to materialize densely."""


class NumericError(BayesInvError, ArithmeticError):
    """A non-finite value appeared during an iteration."""


class DivergenceError(NumericError):
    """An iteration diverged (step size too large or unstable map)."""


class SaddlePointError(BayesInvError):
    """The Hessian at a stationary point is indefinite."""


class DegenerateHessianError(BayesInvError):
    """The Hessian at a stationary point is singular."""


class StepFailureError(BayesInvError):
    """A variational update produced a non positive definite precision."""


class ConfigError(BayesInvError, ValueError):
    """Pipeline configuration is malformed."""


class GenerationError(BayesInvError):
    """Phantom shapes could not be placed."""


class UnsupportedNetworkError(BayesInvError, ValueError):
    """Analytic propagation was requested for a nonlinear layer chain."""


class PipelineStageError(BayesInvError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class ConvergenceError(BayesInvError):
    """An iterative engine stopped before meeting its tolerance.

    ``trace`` carries the diagnostics recorded up to that point.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
