"""Trimodal stock trend prediction with gated cross-attention fusion."""

__version__ = "0.1.0"
