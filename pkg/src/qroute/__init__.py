"""Hybrid quantum-attention policy for split-delivery vehicle routing."""

__version__ = "0.1.0"
