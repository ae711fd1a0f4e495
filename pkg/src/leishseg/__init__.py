"""U-Net segmentation of parasites in stained microscopy images, in plain numpy."""

__version__ = "0.1.0"
