"""Graph-based kinship reasoning over pairs of feature vectors."""

__version__ = "0.1.0"
