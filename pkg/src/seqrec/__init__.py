"""Configurable self-attention sequence recommender for fashion catalogs."""

__version__ = "0.1.0"
