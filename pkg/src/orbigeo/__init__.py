"""Numerical toolkit for geodesics, curve-shortening flow and return maps on spindle orbifolds."""

__version__ = "0.1.0"
