"""Uncertainty-aware multi-target regression with mean-variance ensembles."""

__version__ = "0.1.0"
