"""Desk-scale lab for dual-modality speech emotion recognition training strategies."""

__version__ = "0.1.0"
