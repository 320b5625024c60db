"""Differentiable volumetric inverse rendering with emissive-source reconstruction."""

__version__ = "0.1.0"
