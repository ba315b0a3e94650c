"""Segmentation of lab-grown diamond reactor frames with human-in-the-loop labeling."""

__version__ = "0.1.0"
