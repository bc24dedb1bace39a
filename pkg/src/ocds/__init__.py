"""Optimal-control data selection for small differentiable models."""

__version__ = "0.1.0"
