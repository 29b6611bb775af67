"""Trace-driven simulator of paravirtualized secure-container memory and gate mechanics."""

__version__ = "0.1.0"
