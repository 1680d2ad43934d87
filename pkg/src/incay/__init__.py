"""Softmax-family losses with feature incay, a from-scratch trainer and property checks."""

__version__ = "0.1.0"
