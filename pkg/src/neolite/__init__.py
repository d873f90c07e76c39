"""Learned query optimization on a simulated database."""

__version__ = "0.1.0"
