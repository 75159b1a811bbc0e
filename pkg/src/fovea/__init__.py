"""Perspective-aware scene parsing: heatmaps, fovea fusion, perspective CRF, iIoU metrics."""

__version__ = "0.1.0"
