"""Frequency-spatial transformer blocks and hierarchical de-corrupting training."""

__version__ = "0.1.0"
