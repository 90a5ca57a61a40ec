"""Geometric multi-resolution analysis on a persistent array shelf."""

__version__ = "0.1.0"
