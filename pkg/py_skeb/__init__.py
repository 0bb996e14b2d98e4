"""Provides the core functionality for the PySKeB package."""

__version__ = "1.0.0"
