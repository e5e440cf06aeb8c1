"""Refine a coarse object orientation from a bounding-box image with a shallow network."""
from .rotgeo import AxisAngle, UnitQuaternion
from .sampler import NoiseConfig

__version__ = "0.1.0"

__all__ = ["AxisAngle", "UnitQuaternion", "NoiseConfig", "__version__"]
