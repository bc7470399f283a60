"""From-scratch pipeline for image-based fruit quality grading (A/B/C):
a float32 reverse-mode autodiff core, two CNN families, edge-based
segmentation, training recipes, and explainability tooling.
"""

from .errors import DataError, DimensionError, NumericalError
from .tensor import Tensor

__all__ = ["Tensor", "DataError", "DimensionError", "NumericalError"]

__version__ = "0.1.0"
