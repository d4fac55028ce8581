"""Reinforced self-training for segmentation pseudolabels, at desk scale."""
__version__ = "0.1.0"
