"""Spatio-temporal pedestrian activity maps from a mobile robot's partial observations."""

__version__ = "0.1.0"
