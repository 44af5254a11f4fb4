"""Recurrent multi-frame feature aggregation for binary video segmentation."""

__version__ = "0.1.0"
