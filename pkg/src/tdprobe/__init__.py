"""Detect, measure and manipulate temporal-difference signals in activation data."""

__version__ = "0.1.0"
