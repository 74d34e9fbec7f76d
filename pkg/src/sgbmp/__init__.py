"""Semi-global block matching guided by a disparity prior with per-pixel search ranges."""

__version__ = "0.1.0"
