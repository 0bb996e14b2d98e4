"""Provides utility functions and classes for the PySKeB package."""
