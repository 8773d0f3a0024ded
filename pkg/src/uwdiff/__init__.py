"""Degradation-conditioned diffusion for underwater image enhancement."""

__version__ = "0.1.0"
