"""Apparent diffusion coefficient identification by diffusion-constrained optimization."""

__version__ = "0.1.0"
