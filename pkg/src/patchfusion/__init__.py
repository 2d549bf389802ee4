"""Patch-wise residual network with deep spatial fusion for high-resolution image classification."""

__version__ = "0.1.0"
