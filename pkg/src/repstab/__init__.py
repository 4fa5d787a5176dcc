"""Adversarial-text detection from embedding sensitivity to masking important words."""

__version__ = "0.1.0"
