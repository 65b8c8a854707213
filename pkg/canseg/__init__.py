"""Context Aggregation Network for real-time semantic segmentation, on numpy."""

__version__ = "0.1.0"
