"""Kick-Kac teleportation samplers with an exact finite-state oracle."""

__version__ = "0.1.0"
