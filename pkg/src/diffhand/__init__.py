"""Diffusion model for conditional online handwriting generation."""

__version__ = "0.1.0"
