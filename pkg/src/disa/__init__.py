"""Directional saliency-aware prompt learning for a toy contrastive dual encoder."""

__version__ = "0.1.0"
