"""Uncertainty-gated token routing with evidential heads and prototype classification."""

__version__ = "0.1.0"
