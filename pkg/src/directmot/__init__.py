"""3D multi-object tracking with direct image alignment and photometric bundle adjustment."""

__version__ = "0.1.0"
