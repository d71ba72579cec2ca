"""Deterministic simulator of frugal federated learning strategies with energy accounting."""

__version__ = "0.1.0"
