"""Landslide-scar segmentation: raster I/O, patch sampling, a numpy U-net, and evaluation."""

__version__ = "0.1.0"
