"""Latent-space adversarial audio attacks that survive lossy codec channels,
plus the desk-scale toy stack and evaluation harness around them."""

__version__ = "0.1.0"
