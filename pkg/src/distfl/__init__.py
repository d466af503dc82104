"""Federated learning with server-side distribution extraction and clustering."""

__version__ = "0.1.0"
