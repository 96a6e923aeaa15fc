"""Volume rendering of unsigned distance fields for open-surface reconstruction."""

__version__ = "0.1.0"
