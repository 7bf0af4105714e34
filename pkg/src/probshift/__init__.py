"""Supernet training with a learnable complexity-sampling distribution."""

__version__ = "0.1.0"
