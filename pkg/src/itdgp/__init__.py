"""Imbalanced temporal deep Gaussian process (iTDGP) for perfusion lesion segmentation."""

__version__ = "0.1.0"
