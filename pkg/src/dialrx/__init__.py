"""Dialysis-risk sequence modeling and medication effect estimation."""

__version__ = "0.1.0"
