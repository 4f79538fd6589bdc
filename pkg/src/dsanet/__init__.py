"""Decoupled self-attention modules for a desk-scale one-stage detector."""

__version__ = "0.1.0"
