"""Queueing-based parking lot modeling, verification, and occupancy forecasting."""

__version__ = "0.1.0"
