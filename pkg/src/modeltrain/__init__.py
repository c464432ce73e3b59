"""Privacy-preserving analysis trains over routes of data stations."""

__version__ = "0.1.0"
