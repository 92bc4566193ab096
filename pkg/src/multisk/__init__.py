"""multisk - Many-to-many anchor assignment with Multi-Assignment Sinkhorn-Knopp."""

__version__ = "0.1.0"
