"""Segmentation-guided recurrence-free survival modelling for head and neck cancer."""

__version__ = "0.1.0"
