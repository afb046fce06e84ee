"""Image captioning toolkit over precomputed image features."""

__version__ = "0.1.0"
