"""Reduced-order models registered by entropic optimal transport."""

__version__ = "0.1.0"
