"""Perception-based multi-modal snippet representation for temporal action proposals."""

__version__ = "0.1.0"
