"""Sparse-interaction graph attention network for brain-graph classification, in NumPy."""

__version__ = "0.1.0"
