"""Metric-learning engine: embedding training, latent-space partitioning,
open-set evaluation, and 2-D projection."""

__version__ = "0.1.0"
