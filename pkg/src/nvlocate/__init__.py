"""Locating a single electron spin with several strained NV sensors under dynamical decoupling."""

__version__ = "0.1.0"
