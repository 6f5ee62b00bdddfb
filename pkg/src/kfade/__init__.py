"""Gauss-Newton ascent unlearning with Kronecker-factored curvature."""

__version__ = "0.1.0"
