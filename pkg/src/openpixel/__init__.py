"""Open-set semantic segmentation of aerial tiles with a patch-wise CNN."""

__version__ = "0.1.0"
