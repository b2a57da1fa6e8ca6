"""Cross-stream contrastive learning on skeleton sequences."""

__version__ = "0.1.0"
