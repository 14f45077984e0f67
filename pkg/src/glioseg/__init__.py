"""Volumetric brain-lesion segmentation with a 2D-pretrained encoder lifted to 3D."""

__version__ = "0.1.0"
