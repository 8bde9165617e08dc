"""Activity suffix prediction with an attention encoder-decoder."""

__version__ = "0.1.0"
