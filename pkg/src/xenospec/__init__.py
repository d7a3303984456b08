"""Spectral image analysis and physiology-based augmentation across species."""

__version__ = "0.1.0"
