"""Exception hierarchy shared by all turbosmooth modules."""


class TurboSmoothError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(TurboSmoothError, ValueError):
    pass


class SingularPrecision(TurboSmoothError):
    """A precision matrix could not be inverted (e.g. a flat message)."""


class DegenerateCovariance(TurboSmoothError):
    """A covariance matrix is not positive definite even after regularization."""


class NonPositiveNoise(TurboSmoothError, ValueError):
    pass


class EmptyMixture(TurboSmoothError, ValueError):
    pass


class AllWeightsZero(TurboSmoothError):
    pass


class NonFiniteJacobian(TurboSmoothError):
    pass


class LengthMismatch(TurboSmoothError, ValueError):
    pass


class BackwardPassError(TurboSmoothError):
    """Wraps a failure inside one backward recursion and records its step."""

    def __init__(self, step, cause):
        super().__init__(f"backward pass failed at step {step}: {cause}")
        self.step = step
        self.cause = cause
