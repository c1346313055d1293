"""Estimate and certify L^p Wasserstein contraction of diffusions."""

__version__ = "0.1.0"
