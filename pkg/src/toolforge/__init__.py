"""Verified tool-use trajectory and reflection data generation."""

__version__ = "0.1.0"
