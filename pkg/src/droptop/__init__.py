"""Attentive top-feature dropping for replay-based online continual learning."""

from .kernels import BACKEND

__all__ = ["BACKEND", "__version__"]
__version__ = "0.1.0"
