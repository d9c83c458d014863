"""Exposure correction by estimating and correcting color shifts."""

__version__ = "0.1.0"
