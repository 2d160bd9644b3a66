"""Batched ADMM model-predictive control with a learned torque residual."""
from ._backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
