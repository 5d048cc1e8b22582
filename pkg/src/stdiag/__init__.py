"""Spatio-temporal attention diagnostics for multivariate sensor episodes."""

__version__ = "0.1.0"
