"""Differentiable integral-equation lab: quadrature and attention based
solvers for Volterra/Fredholm problems, trainable end to end."""

from .backend import BACKEND_NAME, COMPILED

__version__ = "0.1.0"
__all__ = ["BACKEND_NAME", "COMPILED", "__version__"]
