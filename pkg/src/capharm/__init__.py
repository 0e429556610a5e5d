"""Spherical-cap harmonic analysis of open triangulated surface patches."""

__version__ = "0.1.0"
