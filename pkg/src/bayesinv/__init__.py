"""Bayesian inference engines for linear inverse problems."""

__version__ = "0.1.0"
