"""Lagrangian dispersion, source-receptor matrices and emission-rate inversion."""

__version__ = "0.1.0"
