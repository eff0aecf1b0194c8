"""Realized-covariation estimation and goodness-of-fit tests for SPDE noise kernels."""

__version__ = "0.1.0"
