"""Exception types raised across the package."""


class NdaeError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(NdaeError, ValueError):
    pass


class SingularMatrix(NdaeError, ArithmeticError):
    pass


class NotSymmetric(NdaeError, ValueError):
    pass


class NotPositiveDefinite(NdaeError, ValueError):
    pass


class NoConvergence(NdaeError, RuntimeError):
    def __init__(self, message, iterations=None, residual_norm=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual_norm = residual_norm


class IndexViolation(NdaeError, ArithmeticError):
    """The algebraic Jacobian (or the stage Jacobian) became singular."""


class SolverError(NdaeError, RuntimeError):
    """A time-stepping failure, tagged with the time at which it happened."""

    def __init__(self, message, time, cause=None):
        super().__init__(f"{message} (t = {time:.17g})")
        self.time = time
        self.cause = cause


class TooFewPoints(NdaeError, ValueError):
    pass


class NonFiniteLoss(NdaeError, FloatingPointError):
    """Training produced a NaN/inf loss; ``checkpoint`` holds the last finite state."""

    def __init__(self, message, epoch, checkpoint=None):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch
        self.checkpoint = checkpoint


class GridMismatch(NdaeError, ValueError):
    pass


class EmptyCloud(NdaeError, ValueError):
    pass


class NotHurwitz(NdaeError, ValueError):
    pass
