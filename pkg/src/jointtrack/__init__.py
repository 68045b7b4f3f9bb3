"""Rigid-body tracking with marker maps, reconstruction and model-based refinement."""

__version__ = "0.1.0"
