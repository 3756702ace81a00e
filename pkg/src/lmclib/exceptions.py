"""Error types raised by the numerical core."""


class NumericalDegeneracyError(RuntimeError):
    """A matrix that should be positive definite failed to factorize."""


class IndefiniteNoiseError(NumericalDegeneracyError):
    """A noise covariance assembled from parameters is not positive definite."""
