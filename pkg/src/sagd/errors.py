"""Exception types raised across the package."""


class DegenerateWeightError(ValueError):
    """A spectral weight is identically zero."""


class DegenerateCovarianceError(ValueError):
    """A covariance has no usable (nonzero) eigenvalues, or is singular where
    a proper density is required."""


class DegenerateDensityError(DegenerateCovarianceError):
    """A smoothed mixture component has a singular covariance."""


class NonFiniteError(FloatingPointError):
    """A score, prediction or loss produced NaN/inf."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DivergenceError(RuntimeError):
    """Particle states blew up during integration."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConsistencyError(RuntimeError):
    """Two independent routes to the same quantity disagree."""
