"""Insideout tracker - markerless inside-out tracking toolkit for robotic ultrasound."""

__version__ = "0.1.0"
