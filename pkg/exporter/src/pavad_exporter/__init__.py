"""Bridges media and text to the engine's on-disk formats."""

__version__ = "0.1.0"
