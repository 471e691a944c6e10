"""Geographically weighted conformal prediction for spatial models."""

__version__ = "0.1.0"
