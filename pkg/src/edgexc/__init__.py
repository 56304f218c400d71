"""Depthwise-separable Xception variants on a small NumPy training stack."""
