"""Differentially private federated learning for tabular heart-disease data."""

__version__ = "0.1.0"
