"""Point-cloud place recognition by global-descriptor retrieval."""

__version__ = "0.1.0"
