"""Constrained policy optimisation guided by a baseline policy."""

__version__ = "0.1.0"
