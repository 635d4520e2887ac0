"""Text + sketch image compression at ultra-low rates."""

__version__ = "0.1.0"
