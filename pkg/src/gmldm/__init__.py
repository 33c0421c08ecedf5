"""Latent diffusion for 3D gray-matter volumes conditioned on functional connectivity."""

__version__ = "0.1.0"
