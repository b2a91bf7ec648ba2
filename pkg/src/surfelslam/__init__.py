"""Offline surfel-based RGB-D SLAM with instance-level semantic fusion."""

__version__ = "0.1.0"

from .geometry import Intrinsics, PixelCoord, Pose, RgbdFrame

__all__ = ["Intrinsics", "PixelCoord", "Pose", "RgbdFrame", "__version__"]
