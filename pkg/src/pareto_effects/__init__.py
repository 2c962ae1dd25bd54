"""Pareto-optimal estimation and policy learning for short- and long-term treatment effects."""

__version__ = "0.1.0"
