"""Domain-guided weight modulation for semi-supervised domain generalization."""

__version__ = "0.1.0"
