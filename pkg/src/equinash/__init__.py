"""Broker / informed-trader equilibrium engine."""

__version__ = "0.1.0"
