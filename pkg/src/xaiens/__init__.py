"""Explanation ensembling: fuse several attribution maps of one image with a
segmentation network trained against object masks, and score the result."""

__version__ = "0.1.0"
