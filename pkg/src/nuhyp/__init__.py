"""Numerical toolkit for nonuniformly hyperbolic torus maps."""

__version__ = "0.1.0"
