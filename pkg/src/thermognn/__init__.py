"""Thermodynamics-informed graph networks for learning dissipative dynamics."""

__version__ = "0.1.0"
