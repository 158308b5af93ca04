"""Nested cross-validation benchmark harness for tabular deep learning models."""
from tabbench.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
