"""Exception types raised across the package."""


class CSKFError(Exception):
    pass


class NotPositiveDefinite(CSKFError):
    def __init__(self, column, pivot=None):
        self.column = column
        self.pivot = pivot
        super().__init__(f"non-positive pivot {pivot!r} at column {column}")


class DimensionMismatch(CSKFError, ValueError):
    pass


class NotSymmetric(CSKFError, ValueError):
    pass


class BehindCamera(CSKFError):
    pass


class ConfigError(CSKFError, ValueError):
    pass


class NotConverged(CSKFError):
    def __init__(self, iterations, grad_norm):
        self.iterations = iterations
        self.grad_norm = grad_norm
        super().__init__(f"not converged after {iterations} iterations (|g| = {grad_norm:.3e})")


class RankDeficient(CSKFError):
    pass


class TooFewPoses(CSKFError):
    pass


class ConstraintInfeasible(CSKFError):
    pass


class FormatError(CSKFError):
    pass


class VersionMismatch(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass


class NonMonotonicTimestamps(CSKFError, ValueError):
    pass


class TriangulationFailed(CSKFError):
    pass


class MahalanobisReject(CSKFError):
    pass


class InsufficientFeatures(CSKFError):
    pass


class DegenerateGeometry(CSKFError):
    pass


class SingularInnovation(CSKFError):
    pass


class SingularCovariance(CSKFError):
    pass
