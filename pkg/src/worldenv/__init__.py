"""Desk-scale world-model-in-the-loop post-training for a toy pick-and-place arm."""

__version__ = "0.1.0"
