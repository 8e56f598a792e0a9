"""Desk-scale cross-modal diffusion-guided sparse-view CT reconstruction."""

__version__ = "0.1.0"
