"""Attention transfer for Vision Transformers."""
