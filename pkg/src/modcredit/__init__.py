"""Modular credit assignment: causal-graph modularity checks and key-door transfer experiments."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
