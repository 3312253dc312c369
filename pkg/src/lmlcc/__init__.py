"""Lung nodule malignancy pipeline: consensus labeling, CT preprocessing,
multi-branch 3D CNN with learnable HU intensity windows, semi-supervised
pseudo-labeling, and evaluation tooling.
"""

__version__ = "0.1.0"
