"""Latent-variable non-autoregressive translation at desk scale."""

__version__ = "0.3.0"
