"""Tracking by latent interpolation between consecutive video frames."""

__version__ = "0.1.0"
