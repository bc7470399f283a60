"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor/image shapes are incompatible with the requested operation."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values or diverged."""


class DataError(RuntimeError):
    """A dataset, manifest, or artifact file is missing or malformed."""
