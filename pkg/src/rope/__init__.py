"""Robust posterior estimation for misspecified simulators."""

__version__ = "0.1.0"
