"""Membership inference on diffusion models by quantile regression over t-error scores."""

__version__ = "0.1.0"
