"""Cooperative 3D multi-object tracking with track queries, in numpy."""

__version__ = "0.1.0"
