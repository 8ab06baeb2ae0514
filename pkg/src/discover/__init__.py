"""Dual-latent variational autoencoders with a condition-invariant latent z
and a condition-aware latent w, trained by alternating max-min updates."""

__version__ = "0.1.0"
