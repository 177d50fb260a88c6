"""Convolutional point transformer for point-cloud classification and segmentation."""

__version__ = "0.1.0"
