"""Rater-aware prompt tuning for multi-rater segmentation."""

__version__ = "0.1.0"
