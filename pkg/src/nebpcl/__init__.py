"""Particle belief propagation and neural enhanced BP for cooperative localization."""

__version__ = "0.1.0"
