"""Distributional successor features for zero-shot policy optimization on finite deterministic MDPs."""

__version__ = "0.1.0"
