"""Profession prediction from mobile-operator call detail records."""

__version__ = "0.1.0"
