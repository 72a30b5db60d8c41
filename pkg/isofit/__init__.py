"""Differentiable isosurface fitting with hash-grid SDF networks, plus CMA-ES prompt-embedding inversion."""

__version__ = "0.1.0"
