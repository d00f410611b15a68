"""Gated cross-attention depth completion at desk scale."""

__version__ = "0.1.0"
