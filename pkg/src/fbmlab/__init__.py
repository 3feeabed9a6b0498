"""Simulation and density-bound verification for equations driven by fractional Brownian motion."""

from .errors import FbmLabError
from .fbm_core import KernelTable, SamplePath, TimeGrid
from .rng import RandomStream

__version__ = "0.1.0"

__all__ = ["FbmLabError", "KernelTable", "RandomStream", "SamplePath", "TimeGrid", "__version__"]
