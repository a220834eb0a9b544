"""Masked edge prediction: a numpy network, iterative unmasking, synthetic data and a boundary benchmark."""

__version__ = "0.1.0"
