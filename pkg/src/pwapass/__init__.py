"""Passivity analysis and passivating control of nonlinear systems through
piecewise affine approximation."""

__version__ = "0.1.0"
