"""Heatmap-guided vector map decoding, losses and evaluation at desk scale."""

__version__ = "0.1.0"
