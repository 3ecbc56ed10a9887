"""Formulaic alpha mining with a structure-aware GFlowNet sampler."""

__version__ = "0.1.0"
