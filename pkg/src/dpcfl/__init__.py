"""Differentially-private clustered federated learning over a multi-BS wireless network."""

__version__ = "0.1.0"
