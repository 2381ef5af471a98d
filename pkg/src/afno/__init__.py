"""Latent-space neural operator with autoregression-free rollouts, PDE data generators and diagnostics."""

__version__ = "0.1.0"
