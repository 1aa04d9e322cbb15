"""Few-shot forest segmentation with texture-attention prototypes."""

__version__ = "0.1.0"
