"""Desk-scale speech-text autoregressive voice conversion on a synthetic world."""

__version__ = "0.1.0"
