"""Bayesian MRI reconstruction from undersampled multi-coil k-space."""

__version__ = "0.1.0"
