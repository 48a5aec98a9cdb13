"""Discrete-event simulator of grouped random access in a massive sensor cell."""

__version__ = "0.1.0"
