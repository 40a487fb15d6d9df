"""Hierarchical local electricity market co-simulation toolkit."""

__version__ = "0.1.0"
