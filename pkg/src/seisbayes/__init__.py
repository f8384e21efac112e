"""Bayesian neural-network seismic impedance inversion with uncertainty."""

__version__ = "0.1.0"
