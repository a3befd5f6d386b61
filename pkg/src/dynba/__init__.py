"""Inertial-prior dynamic landmark handling for visual-inertial estimation."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
