"""Synthetic body phantoms, depth-image simulation, and organ localization."""

__version__ = "0.1.0"
