"""Leakage-free 3x3 inductive kriging with distribution-robust training."""

__version__ = "0.1.0"
