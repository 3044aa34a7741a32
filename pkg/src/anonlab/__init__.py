"""anonlab: desk-scale speaker-adversarial training and evaluation laboratory."""

__version__ = "0.1.0"
