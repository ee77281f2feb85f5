"""Availability poisons, compression countermeasures and desk-scale experiments."""

__version__ = "0.1.0"
