"""Euler schemes, coupled multilevel Monte Carlo and statistical checks for stochastic Volterra equations."""

__version__ = "0.1.0"
