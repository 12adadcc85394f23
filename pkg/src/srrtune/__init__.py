"""Simulation-based tuning of the regularization weight for slice-to-volume super-resolution."""

__version__ = "0.1.0"
