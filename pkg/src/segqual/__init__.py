"""Ground-truth-free segmentation quality assessment."""

__version__ = "0.1.0"
