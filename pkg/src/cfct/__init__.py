"""Contrastive training with interest centers and accept-reject negatives for implicit CF."""

__version__ = "0.1.0"
