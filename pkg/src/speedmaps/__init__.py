"""Image-driven traffic modeling: dense speed, road, and orientation maps."""

__version__ = "0.1.0"
