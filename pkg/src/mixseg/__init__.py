"""Semi-supervised domain adaptation for segmentation with inter- and intra-domain ClassMix."""

__version__ = "0.1.0"
