"""Desk-scale transformer prior mapping interleaved text/subject/edge embeddings to an image embedding."""

__version__ = "0.1.0"
