"""Desk-scale 3D multi-object tracking with stateful evaluation metrics."""

__version__ = "0.1.0"
