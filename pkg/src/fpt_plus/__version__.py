"""Version information for fpt-plus."""

__version__ = "0.1.0"
