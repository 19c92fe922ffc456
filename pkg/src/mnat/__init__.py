"""Desk-scale non-autoregressive translation: CMLM mask-predict with EECR training."""

__version__ = "0.1.0"
