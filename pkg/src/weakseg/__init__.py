"""Weak-annotation segmentation with continuous max-flow and atlas-based outlier removal."""

__version__ = "0.1.0"
