"""Supertoken hyperspectral segmentation: derivative-aware pixel clustering
followed by a token transformer trained on class-proportion labels."""

__version__ = "0.1.0"
