"""Continuous weak measurement of a qubit by a point-contact detector."""

__version__ = "0.1.0"
