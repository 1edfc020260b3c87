"""Interpretable demand-level modelling for on-demand transit."""

__version__ = "0.1.0"
