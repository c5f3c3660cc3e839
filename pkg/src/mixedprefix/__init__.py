"""Mixed-effects prefix-tuning over a small frozen language model."""

__version__ = "0.1.0"
