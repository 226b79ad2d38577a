"""Semi-supervised classification with a mean teacher and a learned similarity network."""

__version__ = "0.1.0"
