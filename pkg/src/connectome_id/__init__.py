"""Connectome fingerprinting: identification, task and performance prediction."""

__version__ = "0.1.0"
