"""Timestep-grouped post-training quantization for toy diffusion models."""

__version__ = "0.1.0"
