"""Exception types shared across the package."""


class ColdsprayError(Exception):
    """Base class for all package-specific errors."""


class ClearanceViolation(ColdsprayError):
    """Nozzle standoff dropped below the required clearance margin."""


class InvalidGeometry(ColdsprayError):
    """Coupon specification describes a non-physical shape."""


class DimensionMismatch(ColdsprayError):
    """Array arguments have incompatible lengths or shapes."""


class SingularCovariance(ColdsprayError):
    """A covariance matrix is not positive definite."""


class SingularPrecision(ColdsprayError):
    """A precision matrix is singular or non-finite."""


class NotPositiveDefinite(ColdsprayError):
    """A quadratic-model Hessian failed its positive-definiteness check."""


class Diverged(ColdsprayError):
    """Trajectory optimization could not find a cost-decreasing step."""


class NonFiniteLoss(ColdsprayError):
    """Training produced a NaN or infinite loss."""


class InfeasibleTarget(ColdsprayError):
    """Target profile lies below the starting profile somewhere."""


class NegativeDeposit(ColdsprayError):
    """Final profile is below the initial profile somewhere."""


class AllStartsFailed(ColdsprayError):
    """No optimizer start produced a finite objective."""


class IncompatibleCheckpoint(ColdsprayError):
    """Policy checkpoint does not match the configured grid."""
