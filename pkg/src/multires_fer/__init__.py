"""Multi-resolution facial expression recognition training and evaluation."""

__version__ = "0.1.0"
