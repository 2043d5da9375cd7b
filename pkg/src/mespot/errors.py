"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Tensor or kernel dimensions are inconsistent with the operation."""


class ManifestError(ValueError):
    """A dataset manifest is malformed or references missing data."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


class NumericalError(RuntimeError):
    """A numerical routine failed (e.g. a covariance stayed singular)."""
