"""Trainable a contrario (NFA) decision layer for small-object segmentation."""

__version__ = "0.1.0"
