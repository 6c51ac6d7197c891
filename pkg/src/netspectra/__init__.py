"""Spectral analysis toolkit for small dense networks trained with SGD."""

__version__ = "0.1.0"
