"""Membership-inference auditing of SGD-trained models with inverse-Hessian scores."""
from .errors import IhaError

__version__ = "0.1.0"

__all__ = ["IhaError", "__version__"]
