"""Albatross detection in VHR satellite imagery with a valid-convolution U-Net."""

__version__ = "0.1.0"
