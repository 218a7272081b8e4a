"""Unsupervised domain adaptation for LiDAR detection from repeated traversals."""

__version__ = "0.1.0"
