"""Realistic test-time data poisoning laboratory."""

__version__ = "0.1.0"
