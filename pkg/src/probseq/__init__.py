"""Probabilistic sequence regression with calibrated aleatoric uncertainty."""

__version__ = "0.1.0"
