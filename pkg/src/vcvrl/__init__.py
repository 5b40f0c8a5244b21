"""Voxel-wise cross-volume SimSiam representation learning for 3-D segmentation."""

__version__ = "0.1.0"
