"""Exception hierarchy shared across the package."""


class PatError(Exception):
    """Base class for all errors raised by :mod:`patrecon`."""


class GeometryError(PatError, ValueError):
    """Sensor geometry does not fit the computational grid."""


class ResolutionError(PatError, ValueError):
    """Two sensors snapped to the same grid point."""


class DimensionError(PatError, ValueError):
    """Array shapes or grids are inconsistent."""


class NumericError(PatError, ArithmeticError):
    """Non-finite values or an otherwise invalid numerical state."""


class DegenerateSignalError(NumericError):
    """A quantity needed for normalisation is zero."""


class IndefiniteOperatorError(NumericError):
    """Conjugate gradients met a non-positive curvature direction."""

    def __init__(self, message, iteration=None, curvature=None, residual=None):
        super().__init__(message)
        self.iteration = iteration
        self.curvature = curvature
        self.residual = residual


class LineSearchFailure(PatError):
    """Backtracking exhausted its budget without a sufficient decrease."""

    def __init__(self, message, betas=()):
        super().__init__(message)
        self.betas = list(betas)


class DivergenceError(NumericError):
    """An iterative method's objective blew up."""


class ConfigError(PatError, ValueError):
    """Invalid or incomplete experiment configuration."""
