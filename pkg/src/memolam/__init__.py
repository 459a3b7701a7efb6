"""Memoization-accelerated ADMM laminography reconstruction."""

from .admm import AdmmConfig, ReconReport, accuracy, reconstruct
from .geometry import Geometry
from .memoclient import MemoClient
from .operators import get_operators

__all__ = ["AdmmConfig", "Geometry", "MemoClient", "ReconReport", "accuracy", "get_operators",
           "reconstruct"]
__version__ = "0.1.0"
