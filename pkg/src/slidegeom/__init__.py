"""Geometry-guided multi-field-of-view classifier for whole-slide-image subtyping."""

__version__ = "0.1.0"
