"""Multi-label facade segmentation: extraction, ground truth, networks and evaluation."""

__version__ = "0.1.0"
