"""Example-tied dropout for memorization-aware training, with tools to localize memorizing units."""

__version__ = "0.1.0"
