"""Quantised SuperPoint feature extraction, bit-exact integer lowering, and
an RGB-D frame-to-frame visual odometry pipeline with trajectory metrics."""

__version__ = "0.1.0"
