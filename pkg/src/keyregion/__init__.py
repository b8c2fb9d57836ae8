"""Sparse key-region adversarial attacks on small convolutional fake-image detectors."""

__version__ = "0.1.0"
