"""Desk-scale automated progressive learning engine."""

__version__ = "0.1.0"
