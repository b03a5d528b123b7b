"""Depth and learning-rate laboratory for arithmetic-mean maximal-update scaling."""

__version__ = "0.1.0"
